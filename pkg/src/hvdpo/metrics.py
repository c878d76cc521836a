"""Inter-frame consistency metrics (windowed SSIM, MSE) and report generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

REPORT_SCHEMA_VERSION = 1
WINDOW = 8


def _ssim_2d(a: np.ndarray, b: np.ndarray, L: float, window: int) -> float:
    H, W = a.shape
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    scores = []
    for y in range(0, H - window + 1, window):
        for x in range(0, W - window + 1, window):
            wa = a[y : y + window, x : x + window]
            wb = b[y : y + window, x : x + window]
            mu_a, mu_b = wa.mean(), wb.mean()
            da, db = wa - mu_a, wb - mu_b
            var_a, var_b = (da * da).mean(), (db * db).mean()
            cov = (da * db).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
            scores.append(num / den)
    return float(np.mean(scores))


def ssim(frame_a, frame_b, value_range: float = 2.0, window: int = WINDOW) -> float:
    """Mean SSIM over non-overlapping window x window tiles with uniform weights.

    Accepts (H, W) images or (C, H, W) frames; channels are averaged.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if value_range <= 0:
        raise ValueError(f"ssim: value_range must be positive, got {value_range}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim: expected (H, W) or (C, H, W), got {a.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"ssim: image {a.shape[1:]} smaller than one {window}x{window} window")
    return float(np.mean([_ssim_2d(a[c], b[c], value_range, window) for c in range(a.shape[0])]))


def mse_consecutive(video) -> float:
    v = np.asarray(video, dtype=np.float64)
    if v.ndim < 2 or v.shape[0] < 2:
        raise ValueError(f"mse_consecutive: need at least 2 frames, got shape {v.shape}")
    return float(np.mean([np.mean((v[i + 1] - v[i]) ** 2) for i in range(v.shape[0] - 1)]))


def ssim_consecutive(video, value_range: float = 2.0) -> float:
    v = np.asarray(video, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError(f"ssim_consecutive: need at least 2 frames, got shape {v.shape}")
    return float(np.mean([ssim(v[i], v[i + 1], value_range) for i in range(v.shape[0] - 1)]))


@dataclass
class VideoScore:
    id: str
    ssim: float
    mse: float


@dataclass
class ConsistencyReport:
    videos: list[VideoScore]
    mean_ssim: float
    mean_mse: float
    metadata: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "metrics": {
                "ssim": "mean consecutive-frame SSIM, raw scale in [-1, 1] (8x8 uniform windows, L=2)",
                "mse": "mean consecutive-frame mean squared error, raw latent units",
            },
            "metadata": dict(sorted(self.metadata.items())),
            "aggregate": {"count": len(self.videos), "mean_ssim": self.mean_ssim, "mean_mse": self.mean_mse},
            "videos": [{"id": v.id, "ssim": v.ssim, "mse": v.mse} for v in self.videos],
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_tsv(self) -> str:
        lines = ["id\tssim\tmse"]
        lines += [f"{v.id}\t{v.ssim:.6f}\t{v.mse:.6f}" for v in self.videos]
        lines.append(f"ALL\t{self.mean_ssim:.6f}\t{self.mean_mse:.6f}")
        return "\n".join(lines) + "\n"


def build_report(videos: Sequence[tuple[str, np.ndarray]] | Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None, value_range: float = 2.0) -> ConsistencyReport:
    items = sorted(videos.items() if isinstance(videos, Mapping) else videos, key=lambda kv: kv[0])
    if not items:
        raise ValueError("build_report: no videos")
    scores = [VideoScore(vid, ssim_consecutive(v, value_range), mse_consecutive(v)) for vid, v in items]
    return ConsistencyReport(
        scores,
        float(np.mean([s.ssim for s in scores])),
        float(np.mean([s.mse for s in scores])),
        {str(k): str(v) for k, v in (metadata or {}).items()},
    )
