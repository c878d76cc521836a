"""Noise-prediction network with sparse causal attention across frames.

Forward pipeline for a latent video of shape (F, C, H, W)::

    conv(C->D) + time/condition embedding -> SiLU -> conv(D->D) -> SiLU      spatial block 1
    frame i attends to keys/values of frames 0 and i-1            (residual)
    learned F x F mix across the frame axis                       (residual)
    conv(D->D) -> SiLU -> conv(D->D)                              (residual) spatial block 2
    SiLU -> conv(D->C)                                                       output

Parameters are plain arrays keyed by name. Passing DiffValue leaves instead
makes the same forward differentiable with respect to them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ShapeError

ATTN_WEIGHTS = ("attn_wq", "attn_wk", "attn_wv", "attn_wo")


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    channels: int = 4
    height: int = 16
    width: int = 16
    hidden: int = 16
    time_dim: int = 16
    n_conditions: int = 4
    heads: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"DenoiserConfig.{name} must be positive, got {v}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        D, C, F = self.hidden, self.channels, self.frames
        return {
            "time_proj": (self.time_dim, D),
            "cond_table": (self.n_conditions, D),
            "s1_conv1_w": (D, C, 3, 3),
            "s1_conv1_b": (D,),
            "s1_conv2_w": (D, D, 3, 3),
            "s1_conv2_b": (D,),
            "attn_wq": (D, D),
            "attn_wk": (D, D),
            "attn_wv": (D, D),
            "attn_wo": (D, D),
            "temporal_mix": (F, F),
            "s2_conv1_w": (D, D, 3, 3),
            "s2_conv1_b": (D,),
            "s2_conv2_w": (D, D, 3, 3),
            "s2_conv2_b": (D,),
            "out_conv_w": (C, D, 3, 3),
            "out_conv_b": (C,),
        }


def _fan_in(name: str, shape: tuple[int, ...], config: DenoiserConfig) -> int:
    if name.endswith("_w"):
        return shape[1] * 9
    if name == "cond_table":
        return config.hidden
    return shape[0]


def init_params(seed: int, config: DenoiserConfig) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases. Same seed, same bits."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def fan_in_bounds(config: DenoiserConfig) -> dict[str, float]:
    return {
        n: 1.0 / math.sqrt(_fan_in(n, s, config))
        for n, s in config.param_shapes().items()
        if not n.endswith("_b")
    }


# --------------------------------------------------------------------------- LoRA


@dataclass
class LoRAAdapter:
    """Low-rank deltas for the attention projections: W + (alpha/rank) * A @ B."""

    rank: int = 4
    alpha: float = 4.0
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.A):
            out[f"lora.{name}.A"] = self.A[name]
            out[f"lora.{name}.B"] = self.B[name]
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], rank: int, alpha: float) -> "LoRAAdapter":
        lora = cls(rank=rank, alpha=alpha)
        for key, value in tensors.items():
            _, name, part = key.split(".")
            getattr(lora, part)[name] = value
        return lora


def init_lora(seed: int, config: DenoiserConfig, rank: int = 4, alpha: float = 4.0, targets=ATTN_WEIGHTS) -> LoRAAdapter:
    """A ~ U(+-1/sqrt(d)), B = 0, so the adapted model starts equal to the base."""
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    d = config.hidden
    lora = LoRAAdapter(rank=rank, alpha=alpha)
    for name in targets:
        lora.A[name] = rng.uniform(-1 / math.sqrt(d), 1 / math.sqrt(d), size=(d, rank)).astype(np.float32)
        lora.B[name] = np.zeros((rank, d), dtype=np.float32)
    return lora


def lora_effective_weight(W, A, B, alpha: float, rank: int) -> DiffValue:
    W = ad.as_value(W)
    A = ad.as_value(A)
    B = ad.as_value(B)
    if A.shape[1] != rank or B.shape[0] != rank:
        raise ShapeError(f"lora: rank mismatch, A {A.shape}, B {B.shape}, rank {rank}")
    if (A.shape[0], B.shape[1]) != W.shape:
        raise ShapeError(f"lora: delta shape {(A.shape[0], B.shape[1])} does not match W {W.shape}")
    return ad.add(W, ad.scale(ad.matmul(A, B), alpha / rank))


def _weight(params: Mapping, name: str, lora: LoRAAdapter | None, lora_values: Mapping | None) -> DiffValue:
    W = ad.as_value(params[name])
    if lora is None or name not in lora.A:
        return W
    src = lora_values if lora_values is not None else {}
    A = src.get(f"lora.{name}.A", lora.A[name])
    B = src.get(f"lora.{name}.B", lora.B[name])
    return lora_effective_weight(W, A, B, lora.alpha, lora.rank)


# --------------------------------------------------------------------------- attention


def sparse_causal_attention(
    tokens,
    params: Mapping,
    lora: LoRAAdapter | None = None,
    heads: int = 1,
    lora_values: Mapping | None = None,
    return_weights: bool = False,
):
    """Frame i queries attend over [K_0; K_{i-1}] / [V_0; V_{i-1}] (frame 0 uses [K_0; K_0]).

    ``tokens`` has shape (F, N, d). The projected attention output passes
    through W_O and is added back to the input.
    """
    x = ad.as_value(tokens)
    if x.value.ndim != 3:
        raise ShapeError(f"sparse_causal_attention: expected (F, N, d) tokens, got {x.shape}")
    F, N, d = x.shape
    if d % heads:
        raise ShapeError(f"sparse_causal_attention: d={d} not divisible by heads={heads}")
    wq, wk, wv, wo = (_weight(params, n, lora, lora_values) for n in ATTN_WEIGHTS)
    if wq.shape != (d, d):
        raise ShapeError(f"sparse_causal_attention: shape mismatch tokens {x.shape} vs W_Q {wq.shape}")
    dk = d // heads
    inv_sqrt = 1.0 / math.sqrt(dk)

    frames = [ad.reshape(ad.take(x, i, i + 1), (N, d)) for i in range(F)]
    keys = [ad.matmul(f, wk) for f in frames]
    vals = [ad.matmul(f, wv) for f in frames]
    outs, weights = [], []
    for i in range(F):
        src = 0 if i == 0 else i - 1
        q = ad.matmul(frames[i], wq)
        k_cat = ad.concatenate([keys[0], keys[src]], axis=0)
        v_cat = ad.concatenate([vals[0], vals[src]], axis=0)
        head_out = []
        for h in range(heads):
            qh, kh, vh = q, k_cat, v_cat
            if heads > 1:
                a, b = h * dk, (h + 1) * dk
                qh, kh, vh = ad.take(q, a, b, 1), ad.take(k_cat, a, b, 1), ad.take(v_cat, a, b, 1)
            attn = ad.softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt))
            weights.append(attn.value)
            head_out.append(ad.matmul(attn, vh))
        o = head_out[0] if heads == 1 else ad.concatenate(head_out, axis=1)
        outs.append(ad.add(frames[i], ad.matmul(o, wo)))
    out = ad.reshape(ad.concatenate(outs, axis=0), (F, N, d))
    if return_weights:
        return out, weights
    return out


# --------------------------------------------------------------------------- forward


def time_encoding(t: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal features of the timestep, shape (1, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).reshape(1, dim).astype(dtype)


def _bias(h: DiffValue, b) -> DiffValue:
    b = ad.as_value(b)
    return ad.add(h, ad.broadcast_to(ad.reshape(b, (1, b.shape[0], 1, 1)), h.shape))


def _to_tokens(h: DiffValue) -> DiffValue:
    F, D, H, W = h.shape
    per = [ad.transpose(ad.reshape(ad.take(h, i, i + 1), (D, H * W))) for i in range(F)]
    return ad.reshape(ad.concatenate(per, axis=0), (F, H * W, D))


def _from_tokens(x: DiffValue, H: int, W: int) -> DiffValue:
    F, N, D = x.shape
    per = [ad.reshape(ad.transpose(ad.reshape(ad.take(x, i, i + 1), (N, D))), (1, D, H, W)) for i in range(F)]
    return ad.concatenate(per, axis=0)


def denoise_forward(
    v_t,
    t: int,
    cond: int,
    params: Mapping,
    config: DenoiserConfig,
    lora: LoRAAdapter | None = None,
    lora_values: Mapping | None = None,
) -> DiffValue:
    v = ad.as_value(v_t)
    if v.shape != config.video_shape:
        raise ShapeError(f"denoise_forward: expected video {config.video_shape}, got {v.shape}")
    if not 0 <= cond < config.n_conditions:
        raise ValueError(f"denoise_forward: unknown condition id {cond}")
    F, C, H, W = v.shape
    D = config.hidden
    dtype = ad.as_value(params["time_proj"]).dtype
    if v.dtype != dtype:
        v = ad.DiffValue(v.value.astype(dtype))

    t_emb = ad.matmul(ad.as_value(time_encoding(t, config.time_dim, dtype)), ad.as_value(params["time_proj"]))
    c_emb = ad.take(ad.as_value(params["cond_table"]), cond, cond + 1)
    emb = ad.reshape(ad.add(t_emb, c_emb), (1, D, 1, 1))

    h = _bias(ad.conv2d(v, params["s1_conv1_w"]), params["s1_conv1_b"])
    h = ad.silu(ad.add(h, ad.broadcast_to(emb, h.shape)))
    h = ad.silu(_bias(ad.conv2d(h, params["s1_conv2_w"]), params["s1_conv2_b"]))

    tok = sparse_causal_attention(_to_tokens(h), params, lora, config.heads, lora_values)
    h = _from_tokens(tok, H, W)

    flat = ad.reshape(h, (F, D * H * W))
    h = ad.reshape(ad.add(flat, ad.matmul(ad.as_value(params["temporal_mix"]), flat)), (F, D, H, W))

    r = ad.silu(_bias(ad.conv2d(h, params["s2_conv1_w"]), params["s2_conv1_b"]))
    h = ad.add(h, _bias(ad.conv2d(r, params["s2_conv2_w"]), params["s2_conv2_b"]))

    return _bias(ad.conv2d(ad.silu(h), params["out_conv_w"]), params["out_conv_b"])


class Denoiser:
    """Callable model bundle: (v_t, t, cond) -> predicted noise as a DiffValue."""

    def __init__(self, config: DenoiserConfig, params: Mapping, lora: LoRAAdapter | None = None, lora_values: Mapping | None = None):
        self.config = config
        self.params = params
        self.lora = lora
        self.lora_values = lora_values

    def __call__(self, v_t, t: int, cond: int) -> DiffValue:
        return denoise_forward(v_t, t, cond, self.params, self.config, self.lora, self.lora_values)
