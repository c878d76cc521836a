"""Two-stage training (denoising pretraining, then DPO on LoRA), inference, checkpoints."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import PreferencePairIndex, VideoRecord
from .denoiser import Denoiser, DenoiserConfig, LoRAAdapter, init_lora
from .diffusion import FrameMask, NoiseSchedule, ddim_invert, ddim_sample, make_linear_schedule, masked_mse, q_sample, strided_steps
from .objectives import dpo_pair_loss

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"HVCK"
CKPT_VERSION = 1
_ARCH_FIELDS = tuple(f.name for f in fields(DenoiserConfig))


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "A"
    lr: float = 2e-3
    batch_size: int = 1
    iterations: int = 2000
    beta: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    lora_rank: int = 4
    lora_alpha: float = 4.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    frames: int = 8
    channels: int = 4
    height: int = 16
    width: int = 16
    hidden: int = 16
    time_dim: int = 16
    n_conditions: int = 4
    heads: int = 1

    def __post_init__(self):
        if self.stage not in ("A", "B"):
            raise ValueError(f"stage must be 'A' or 'B', got {self.stage!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        base = {"A": dict(lr=2e-3, iterations=2000, weight_decay=0.0), "B": dict(lr=1e-4, iterations=1000, weight_decay=1e-2)}
        return cls(stage=stage, **{**base[stage], **overrides})

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kind = known[key].type
            if kind in ("int", int):
                kwargs[key] = int(raw)
            elif kind in ("float", float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        stage = str(kwargs.pop("stage", "A"))
        return cls.for_stage(stage, **kwargs)

    def arch(self) -> DenoiserConfig:
        return DenoiserConfig(**{k: getattr(self, k) for k in _ARCH_FIELDS})

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def resolved_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in asdict(self).items()]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.resolved_lines()).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"optimizer_step: gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p
        new_params[name] = (p - lr * update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, OptimizerState(new_m, new_v, step)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, total


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: DenoiserConfig
    params: dict[str, np.ndarray]
    lora: LoRAAdapter | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def model(self, use_lora: bool = True) -> Denoiser:
        return Denoiser(self.config, self.params, self.lora if use_lora else None)

    def schedule(self) -> NoiseSchedule:
        m = self.metadata
        if "schedule.T" not in m:
            return make_linear_schedule()
        return make_linear_schedule(int(m["schedule.T"]), float(m["schedule.beta_start"]), float(m["schedule.beta_end"]))


def _meta_block(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.metadata)
    for k in _ARCH_FIELDS:
        meta[f"arch.{k}"] = str(getattr(ckpt.config, k))
    if ckpt.lora is not None:
        meta["lora.rank"] = str(ckpt.lora.rank)
        meta["lora.alpha"] = repr(float(ckpt.lora.alpha))
    for k, v in meta.items():
        if "\n" in k or "\n" in str(v) or ":" in k:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
    return "".join(f"{k}:{meta[k]}\n" for k in sorted(meta)).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = dict(sorted(ckpt.params.items()))
    if ckpt.lora is not None:
        tensors.update(ckpt.lora.tensors())
    meta = _meta_block(ckpt)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: unexpected end of data reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, include_lora: bool = True) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta_text = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    meta = {}
    for line in meta_text.splitlines():
        key, sep, val = line.partition(":")
        if not sep:
            raise CheckpointError(f"{path}: malformed metadata line {line!r}")
        meta[key] = val
    try:
        config = DenoiserConfig(**{k: int(meta.pop(f"arch.{k}")) for k in _ARCH_FIELDS})
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing architecture field {exc.args[0]}") from None
    rank = int(meta.pop("lora.rank")) if "lora.rank" in meta else None
    alpha = float(meta.pop("lora.alpha")) if "lora.alpha" in meta else None

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        ndim = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"dims of {name}"))
        n = math.prod(dims)
        raw = r.take(4 * n, f"data of tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")

    expected = config.param_shapes()
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors.pop(name)
    lora_t = {k: v for k, v in tensors.items() if k.startswith("lora.")}
    extra = sorted(set(tensors) - set(lora_t))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]}")
    lora = None
    if lora_t and include_lora:
        if rank is None or alpha is None:
            raise CheckpointError(f"{path}: LoRA tensors present without lora.rank/lora.alpha")
        d = config.hidden
        for name, arr in lora_t.items():
            want = (d, rank) if name.endswith(".A") else (rank, d)
            if arr.shape != want:
                raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {want}")
        lora = LoRAAdapter.from_tensors(lora_t, rank, alpha)
    return Checkpoint(config, params, lora, meta)


# --------------------------------------------------------------------------- training loops


@dataclass
class StepLog:
    step: int
    loss: float
    margin: float | None = None
    wall_ms: float = 0.0
    base_grad_abs: float = 0.0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[StepLog]


def _check_geometry(records: Sequence[VideoRecord], cfg: DenoiserConfig) -> None:
    if not records:
        raise ValueError("training dataset is empty")
    for r in records:
        if r.frames.shape != cfg.video_shape:
            raise ValueError(f"record {r.id} has shape {r.frames.shape}, expected {cfg.video_shape}")
        if not 0 <= r.condition < cfg.n_conditions:
            raise ValueError(f"record {r.id} has condition {r.condition} outside [0, {cfg.n_conditions})")


def _metadata(config: TrainConfig, iteration: int) -> dict[str, str]:
    return {
        "stage": config.stage,
        "iteration": str(iteration),
        "seed": str(config.seed),
        "config_digest": config.digest(),
        "schedule.T": str(config.T),
        "schedule.beta_start": repr(config.beta_start),
        "schedule.beta_end": repr(config.beta_end),
    }


def _fail_if_nonfinite(step: int, value: float) -> None:
    if not math.isfinite(value):
        logger.error("non-finite loss %r at step %d", value, step)
        raise TrainingDiverged(f"non-finite loss {value!r} at step {step}")


Observer = Callable[[int, np.ndarray, np.ndarray], None]


def train_stage_a(
    config: TrainConfig,
    dataset: Sequence[VideoRecord],
    init: Mapping[str, np.ndarray],
    observer: Observer | None = None,
) -> TrainResult:
    """Denoising training of every parameter with frame 0 held clean.

    ``observer(step, x0, x_t)`` sees each training latent after noising.
    """
    cfg = config.arch()
    records = sorted(dataset, key=lambda r: r.id)
    _check_geometry(records, cfg)
    schedule = config.schedule()
    mask = FrameMask.first_frame(cfg.frames)
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v, dtype=np.float32, copy=True) for k, v in init.items()}
    state = OptimizerState.zeros(params)
    history: list[StepLog] = []
    for step in range(config.iterations):
        t0 = time.perf_counter()
        leaves = {k: ad.parameter(v) for k, v in params.items()}
        model = Denoiser(cfg, leaves)
        losses = []
        for _ in range(config.batch_size):
            rec = records[int(rng.integers(len(records)))]
            t = int(rng.integers(1, schedule.T + 1))
            eps = rng.standard_normal(cfg.video_shape).astype(np.float32)
            x_t = q_sample(rec.frames, t, eps, schedule, mask)
            if observer is not None:
                observer(step, rec.frames, x_t)
            losses.append(masked_mse(model(x_t, t, rec.condition), eps, mask))
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        if len(losses) > 1:
            loss = ad.scale(loss, 1.0 / len(losses))
        _fail_if_nonfinite(step, loss.item())
        ad.backward(loss)
        grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v) for k, v in params.items()}
        grads, _ = clip_global_norm(grads, config.grad_clip)
        params, state = optimizer_step(
            params, grads, state, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
        )
        history.append(StepLog(step, loss.item(), wall_ms=(time.perf_counter() - t0) * 1e3))
        if step % 100 == 0:
            logger.info("stage A step %d loss %.5f", step, loss.item())
    ckpt = Checkpoint(cfg, params, None, _metadata(config, config.iterations))
    return TrainResult(ckpt, history)


def train_stage_b(
    config: TrainConfig,
    pairs: PreferencePairIndex,
    dataset: Sequence[VideoRecord],
    base: Checkpoint,
    observer: Observer | None = None,
) -> TrainResult:
    """DPO fine-tuning of a fresh LoRA adapter against a frozen copy of ``base``."""
    cfg = base.config
    if cfg != config.arch():
        raise ValueError(f"config architecture {config.arch()} does not match checkpoint {cfg}")
    if not pairs.pairs:
        raise ValueError("stage B needs at least one preference pair")
    by_id = {r.id: r for r in dataset}
    _check_geometry(list(by_id.values()), cfg)
    for p in pairs.pairs:
        for vid in (p.winner, p.loser):
            if vid not in by_id:
                raise KeyError(f"pair references unknown video id {vid!r}")
    schedule = config.schedule()
    mask = FrameMask.first_frame(cfg.frames)
    rng = np.random.default_rng(config.seed)
    # frozen copies; leaves with requires_grad=False so any leak would show up in .grad
    frozen = {k: np.array(v, copy=True) for k, v in base.params.items()}
    base_leaves = {k: ad.DiffValue(v) for k, v in frozen.items()}
    ref = Denoiser(cfg, frozen)
    lora = init_lora(int(np.random.default_rng([config.seed, 1]).integers(2**31)), cfg, config.lora_rank, config.lora_alpha)
    weights = lora.tensors()
    state = OptimizerState.zeros(weights)
    history: list[StepLog] = []
    for step in range(config.iterations):
        t0 = time.perf_counter()
        leaves = {k: ad.parameter(v) for k, v in weights.items()}
        theta = Denoiser(cfg, base_leaves, lora, leaves)
        losses, margins = [], []
        for _ in range(config.batch_size):
            pair = pairs.pairs[int(rng.integers(len(pairs.pairs)))]
            t = int(rng.integers(1, schedule.T + 1))
            eps_w = rng.standard_normal(cfg.video_shape).astype(np.float32)
            eps_l = rng.standard_normal(cfg.video_shape).astype(np.float32)
            w, l = by_id[pair.winner], by_id[pair.loser]
            if observer is not None:
                observer(step, w.frames, q_sample(w.frames, t, eps_w, schedule, mask))
                observer(step, l.frames, q_sample(l.frames, t, eps_l, schedule, mask))
            res = dpo_pair_loss(theta, ref, w.frames, l.frames, t, eps_w, eps_l, pair.condition, schedule, mask, config.beta)
            losses.append(res.loss)
            margins.append(res.margin)
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        if len(losses) > 1:
            loss = ad.scale(loss, 1.0 / len(losses))
        _fail_if_nonfinite(step, loss.item())
        ad.backward(loss)
        base_abs = sum(float(np.abs(b.grad).sum()) for b in base_leaves.values() if b.grad is not None)
        grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v) for k, v in weights.items()}
        grads, _ = clip_global_norm(grads, config.grad_clip)
        weights, state = optimizer_step(
            weights, grads, state, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay
        )
        history.append(
            StepLog(step, loss.item(), float(np.mean(margins)), (time.perf_counter() - t0) * 1e3, base_abs)
        )
        if step % 100 == 0:
            logger.info("stage B step %d loss %.6f margin %.3e", step, loss.item(), history[-1].margin)
    trained = LoRAAdapter.from_tensors(weights, lora.rank, lora.alpha)
    ckpt = Checkpoint(cfg, frozen, trained, _metadata(config, config.iterations))
    return TrainResult(ckpt, history)


def write_log(path, history: Sequence[StepLog], stage: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if stage == "B":
            fh.write("step\tloss\tmargin\twall_ms\n")
            for h in history:
                fh.write(f"{h.step}\t{h.loss!r}\t{h.margin!r}\t{h.wall_ms:.3f}\n")
        else:
            fh.write("step\tloss\twall_ms\n")
            for h in history:
                fh.write(f"{h.step}\t{h.loss!r}\t{h.wall_ms:.3f}\n")


# --------------------------------------------------------------------------- inference


def _resolve_steps(steps, T: int, descending: bool) -> list[int]:
    seq = strided_steps(T, steps) if isinstance(steps, int) else list(steps)
    seq = sorted(set(seq))
    return seq[::-1] if descending else seq


def run_inference(ckpt: Checkpoint, first_frame, cond: int, steps, seed: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Frame 0 = first_frame (held clean); frames 1.. start as seeded Gaussian noise."""
    cfg = ckpt.config
    first_frame = np.asarray(first_frame, dtype=np.float32)
    if first_frame.shape != cfg.video_shape[1:]:
        raise ValueError(f"first frame has shape {first_frame.shape}, expected {cfg.video_shape[1:]}")
    schedule = schedule or ckpt.schedule()
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal(cfg.video_shape).astype(np.float32)
    x_T[0] = first_frame
    mask = FrameMask.first_frame(cfg.frames)
    return ddim_sample(ckpt.model(), x_T, cond, _resolve_steps(steps, schedule.T, True), schedule, mask)


def run_inversion(ckpt: Checkpoint, video, cond: int, steps, schedule: NoiseSchedule | None = None, refine_iters: int = 2) -> np.ndarray:
    schedule = schedule or ckpt.schedule()
    mask = FrameMask.first_frame(ckpt.config.frames)
    seq = _resolve_steps(steps, schedule.T, False)
    return ddim_invert(ckpt.model(), np.asarray(video, dtype=np.float32), cond, seq, schedule, mask, refine_iters)


def reconstruct(ckpt: Checkpoint, video, cond: int, steps, schedule: NoiseSchedule | None = None, refine_iters: int = 2) -> np.ndarray:
    """Invert then resample along the same step grid."""
    schedule = schedule or ckpt.schedule()
    latent = run_inversion(ckpt, video, cond, steps, schedule, refine_iters)
    mask = FrameMask.first_frame(ckpt.config.frames)
    return ddim_sample(ckpt.model(), latent, cond, _resolve_steps(steps, schedule.T, True), schedule, mask)
