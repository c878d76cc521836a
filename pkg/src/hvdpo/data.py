"""Scored video datasets, preference pairing, toy video generation and the on-disk formats."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

VIDEO_MAGIC = b"HVDP"
VIDEO_VERSION = 1
INDEX_HEADER = ("id", "condition", "path", "score")
TOY_KINDS = ("moving-blob", "gradient-shift", "blink")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- video files


def write_video(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4 or min(frames.shape) < 1:
        raise FormatError(f"video must be a non-empty F x C x H x W array, got {frames.shape}")
    header = VIDEO_MAGIC + struct.pack("<5I", VIDEO_VERSION, *frames.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_video(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise FormatError(f"{path}: unexpected end of data in header")
    if data[:4] != VIDEO_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, *dims = struct.unpack("<5I", data[4:24])
    if version != VIDEO_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: non-positive dimension in shape {tuple(dims)}")
    n = math.prod(dims)
    body = data[24:]
    if len(body) < 4 * n:
        raise FormatError(f"{path}: unexpected end of data ({len(body)} of {4 * n} bytes)")
    if len(body) > 4 * n:
        raise FormatError(f"{path}: {len(body) - 4 * n} trailing bytes after tensor data")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(dims)


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Map values into [-1, 1]; data already in range is returned unchanged."""
    frames = np.asarray(frames, dtype=np.float32)
    lo, hi = float(frames.min()), float(frames.max())
    if lo >= -1.0 and hi <= 1.0:
        return frames
    if hi == lo:
        return np.zeros_like(frames)
    return (2.0 * (frames - lo) / (hi - lo) - 1.0).astype(np.float32)


# --------------------------------------------------------------------------- records and index


@dataclass(frozen=True)
class VideoRecord:
    id: str
    condition: int
    frames: np.ndarray
    score: float | None = None


@dataclass(frozen=True)
class IndexEntry:
    id: str
    condition: int
    path: str
    score: float | None = None


def write_index(path, entries: Iterable[IndexEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(INDEX_HEADER) + "\n")
        for e in sorted(entries, key=lambda e: e.id):
            score = "" if e.score is None else repr(float(e.score))
            fh.write(f"{e.id}\t{e.condition}\t{e.path}\t{score}\n")


def read_index(path) -> list[IndexEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if tuple(cols) == INDEX_HEADER:
                continue
            if len(cols) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            vid, cond, rel, score = cols
            try:
                entries.append(IndexEntry(vid, int(cond), rel, float(score) if score else None))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return entries


def load_dataset(dataset_dir, index_file: str = "index.tsv") -> list[VideoRecord]:
    """Read every video named by the index, normalized to [-1, 1], sorted by id."""
    root = Path(dataset_dir)
    records = []
    for e in read_index(root / index_file):
        frames = normalize_frames(read_video(root / e.path))
        records.append(VideoRecord(e.id, e.condition, frames, e.score))
    shapes = {r.frames.shape for r in records}
    if len(shapes) > 1:
        raise FormatError(f"{root}: videos have mixed shapes {sorted(shapes)}")
    return sorted(records, key=lambda r: r.id)


def save_dataset(out_dir, records: Sequence[VideoRecord]) -> None:
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in records:
        rel = f"videos/{r.id}.hvdp"
        write_video(out / rel, r.frames)
        entries.append(IndexEntry(r.id, r.condition, rel, r.score))
    write_index(out / "index.tsv", entries)


def ingest_scores(dataset_dir, scores_file) -> tuple[list[IndexEntry], list[str]]:
    """Attach id,score rows to the index. Duplicate ids: last row wins, with a warning.

    Returns the updated entries (sorted by id) and the warnings issued.
    """
    entries = {e.id: e for e in read_index(Path(dataset_dir) / "index.tsv")}
    warnings: list[str] = []
    seen: set[str] = set()
    with open(scores_file, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and [c.strip() for c in row] == ["id", "score"]:
                continue
            if len(row) != 2:
                raise FormatError(f"{scores_file}:{lineno}: malformed row, expected 'id,score'")
            vid, raw = row[0].strip(), row[1].strip()
            try:
                score = float(raw)
            except ValueError:
                raise FormatError(f"{scores_file}:{lineno}: malformed score {raw!r}") from None
            if not math.isfinite(score):
                raise FormatError(f"{scores_file}:{lineno}: non-finite score {raw!r}")
            if vid not in entries:
                raise KeyError(f"{scores_file}:{lineno}: unknown video id {vid!r}")
            if vid in seen:
                msg = f"{scores_file}:{lineno}: duplicate score for {vid!r}, keeping the later value"
                logger.warning(msg)
                warnings.append(msg)
            seen.add(vid)
            entries[vid] = replace(entries[vid], score=score)
    return sorted(entries.values(), key=lambda e: e.id), warnings


# --------------------------------------------------------------------------- pairing


@dataclass(frozen=True)
class PreferencePair:
    winner: str
    loser: str
    condition: int


@dataclass(frozen=True)
class PreferencePairIndex:
    pairs: tuple[PreferencePair, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.pairs)


def _orderable_count(records: Sequence[VideoRecord]) -> int:
    n = 0
    for i, a in enumerate(records):
        for b in records[i + 1 :]:
            if a.condition == b.condition and a.score != b.score:
                n += 1
    return n


def build_pairs(records: Sequence[VideoRecord], n_pairs: int, seed: int, max_retries: int = 1000) -> PreferencePairIndex:
    """Shuffle, then draw random same-condition pairs oriented by score.

    Draws are with replacement across pairs (a video may recur) but a pair
    never contains the same video twice. Ties are discarded and redrawn.
    """
    scored = sorted((r for r in records if r.score is not None), key=lambda r: r.id)
    if n_pairs < 1:
        raise ValueError(f"build_pairs: n_pairs must be >= 1, got {n_pairs}")
    if len(scored) < 2 or _orderable_count(scored) == 0:
        raise ValueError(f"build_pairs: no orderable pairs (achievable: 0 of {n_pairs} requested)")
    rng = np.random.default_rng(seed)
    pool = [scored[k] for k in rng.permutation(len(scored))]
    pairs: list[PreferencePair] = []
    for _ in range(n_pairs):
        for _attempt in range(max_retries):
            i, j = rng.choice(len(pool), size=2, replace=False)
            a, b = pool[i], pool[j]
            if a.condition != b.condition or a.score == b.score:
                continue
            w, l = (a, b) if a.score > b.score else (b, a)
            pairs.append(PreferencePair(w.id, l.id, w.condition))
            break
        else:
            raise ValueError(
                f"build_pairs: retries exhausted (achievable: {len(pairs)} of {n_pairs} requested)"
            )
    return PreferencePairIndex(tuple(pairs), seed)


def write_pairs(path, index: PreferencePairIndex) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# seed={index.seed}\n")
        for p in index.pairs:
            fh.write(f"{p.winner}\t{p.loser}\t{p.condition}\n")


def read_pairs(path) -> PreferencePairIndex:
    seed = None
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key.strip() == "seed":
                    seed = int(val)
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise FormatError(f"{path}:{lineno}: expected winner, loser, condition")
            pairs.append(PreferencePair(cols[0], cols[1], int(cols[2])))
    if seed is None:
        raise FormatError(f"{path}: missing '# seed=<n>' header")
    return PreferencePairIndex(tuple(pairs), seed)


# --------------------------------------------------------------------------- toy videos


def _toy_clean(kind: str, rng: np.random.Generator, shape) -> np.ndarray:
    F, C, H, W = shape
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    ch_gain = rng.uniform(0.5, 1.0, size=C) * rng.choice([-1.0, 1.0], size=C)
    out = np.zeros(shape, dtype=np.float64)
    if kind == "moving-blob":
        cy, cx = rng.uniform(0.3, 0.7) * H, rng.uniform(0.3, 0.7) * W
        vy, vx = rng.uniform(-0.6, 0.6, size=2)
        radius = rng.uniform(0.15, 0.25) * min(H, W)
        for f in range(F):
            py = cy + vy * f
            px = cx + vx * f
            blob = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * radius**2))
            out[f] = ch_gain[:, None, None] * (2 * blob - 1)[None]
    elif kind == "gradient-shift":
        theta = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.2, 0.5)
        freq = rng.uniform(0.2, 0.4)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        for f in range(F):
            phase = speed * f
            out[f] = ch_gain[:, None, None] * np.sin(freq * proj + phase)[None]
    elif kind == "blink":
        cy, cx = rng.uniform(0.3, 0.7) * H, rng.uniform(0.3, 0.7) * W
        radius = rng.uniform(0.2, 0.3) * min(H, W)
        disc = (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2).astype(np.float64)
        period = rng.uniform(4.0, 8.0)
        for f in range(F):
            level = 0.5 + 0.5 * np.cos(2 * np.pi * f / period)
            out[f] = ch_gain[:, None, None] * (disc * level * 1.6 - 0.8)[None]
    else:
        raise ValueError(f"unknown toy kind {kind!r}; expected one of {TOY_KINDS}")
    return out


def gen_toy_videos(
    kind: str,
    count: int,
    condition: int,
    seed: int,
    quality: float,
    shape: tuple[int, int, int, int] = (8, 4, 16, 16),
    prefix: str | None = None,
) -> list[VideoRecord]:
    """Synthetic videos whose score is their quality.

    quality=1 gives smooth, coherent motion; lower quality adds motion jitter
    and per-frame independent noise.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; expected one of {TOY_KINDS}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= quality <= 1.0:
        raise ValueError(f"quality must lie in [0, 1], got {quality}")
    rng = np.random.default_rng(seed)
    noise_level = 0.35 * (1.0 - quality)
    jitter = 1.0 - quality
    prefix = prefix or f"{kind}-c{condition}-s{seed}"
    out = []
    for k in range(count):
        # draw the clean path first so quality never changes the underlying motion
        clean = _toy_clean(kind, rng, shape)
        noisy_rng = np.random.default_rng([seed, k])
        if jitter > 0:
            clean = _jitter_frames(clean, noisy_rng, jitter)
        frames = clean + noise_level * noisy_rng.standard_normal(shape)
        frames = np.clip(frames, -1.0, 1.0).astype(np.float32)
        out.append(VideoRecord(f"{prefix}-{k:03d}", condition, frames, float(quality)))
    return out


def _jitter_frames(clean: np.ndarray, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Random spatial shifts per frame (frame 0 stays put)."""
    out = clean.copy()
    max_shift = int(round(3 * jitter))
    if max_shift == 0:
        return out
    for f in range(1, clean.shape[0]):
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out[f] = np.roll(clean[f], (int(dy), int(dx)), axis=(1, 2))
    return out
