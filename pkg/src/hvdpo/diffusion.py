"""Noise schedule, closed-form forward noising, the simple loss, and deterministic DDIM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import DiffValue, as_value, concatenate, mean_all, multiply, no_grad, subtract, take

# A model maps (latent video, timestep, condition id) to a noise prediction.
Model = Callable[[np.ndarray, int, int], "DiffValue | np.ndarray"]


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables for timesteps 1..T (array index t-1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def strided_steps(T: int, n: int) -> list[int]:
    """n evenly spaced timesteps ending at T, ascending (inversion order)."""
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    return [int(round(T * (k + 1) / n)) for k in range(n)]


@dataclass(frozen=True)
class FrameMask:
    keep_clean: tuple[bool, ...]

    @classmethod
    def first_frame(cls, frames: int) -> "FrameMask":
        return cls(tuple(k == 0 for k in range(frames)))

    @classmethod
    def none(cls, frames: int) -> "FrameMask":
        return cls((False,) * frames)

    def clean_indices(self) -> list[int]:
        return [k for k, c in enumerate(self.keep_clean) if c]

    def noised_indices(self) -> list[int]:
        return [k for k, c in enumerate(self.keep_clean) if not c]


def _check_video(name: str, x: np.ndarray, mask: FrameMask) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected F x C x H x W video, got shape {x.shape}")
    if len(mask.keep_clean) != x.shape[0]:
        raise ValueError(f"{name}: mask covers {len(mask.keep_clean)} frames, video has {x.shape[0]}")


def _restore_clean(out: np.ndarray, src: np.ndarray, mask: FrameMask) -> np.ndarray:
    for k in mask.clean_indices():
        out[k] = src[k]
    return out


def q_sample(x0, t: int, eps, schedule: NoiseSchedule, mask: FrameMask) -> np.ndarray:
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: shape mismatch {x0.shape} vs {eps.shape}")
    _check_video("q_sample", x0, mask)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"q_sample: timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    out = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)
    return _restore_clean(out, x0, mask)


def simple_loss(model: Model, x0, t: int, eps, cond: int, schedule: NoiseSchedule, mask: FrameMask) -> DiffValue:
    """Mean squared noise-prediction error over the frames that were noised."""
    x0 = np.asarray(x0)
    x_t = q_sample(x0, t, eps, schedule, mask)
    pred = as_value(model(x_t, t, cond))
    return masked_mse(pred, eps, mask)


def masked_mse(pred: DiffValue, target, mask: FrameMask) -> DiffValue:
    """mean((target - pred)^2) restricted to non-clean frames."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"masked_mse: shape mismatch {pred.shape} vs {target.shape}")
    idx = mask.noised_indices()
    if not idx:
        raise ValueError("masked_mse: every frame is marked clean")
    if len(idx) == pred.shape[0]:
        p, tg = pred, target
    else:
        runs = _runs(idx)
        p = concatenate([take(pred, a, b) for a, b in runs]) if len(runs) > 1 else take(pred, *runs[0])
        tg = np.concatenate([target[a:b] for a, b in runs])
    diff = subtract(as_value(tg.astype(p.dtype)), p)
    return mean_all(multiply(diff, diff))


def _runs(idx: Sequence[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for k in idx:
        if runs and runs[-1][1] == k:
            runs[-1] = (runs[-1][0], k + 1)
        else:
            runs.append((k, k + 1))
    return runs


def ddim_step(x_t, eps_pred, t: int, t_prev: int, schedule: NoiseSchedule, mask: FrameMask) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t down to t_prev."""
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step: need t > t_prev >= 0, got {t}, {t_prev}")
    return _ddim_move(x_t, eps_pred, t, t_prev, schedule, mask)


def ddim_step_inverse(x_prev, eps_pred, t_prev: int, t: int, schedule: NoiseSchedule, mask: FrameMask) -> np.ndarray:
    """The same recurrence run upward in noise level, from t_prev to t."""
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step_inverse: need t > t_prev >= 0, got {t}, {t_prev}")
    return _ddim_move(x_prev, eps_pred, t_prev, t, schedule, mask)


def _ddim_move(x, eps_pred, t_from: int, t_to: int, schedule: NoiseSchedule, mask: FrameMask) -> np.ndarray:
    x = np.asarray(x)
    eps_pred = np.asarray(eps_pred)
    if x.shape != eps_pred.shape:
        raise ValueError(f"ddim: shape mismatch {x.shape} vs {eps_pred.shape}")
    _check_video("ddim", x, mask)
    a_from = schedule.alpha_bar(t_from)
    a_to = schedule.alpha_bar(t_to)
    x64 = x.astype(np.float64)
    e64 = eps_pred.astype(np.float64)
    x0_hat = (x64 - np.sqrt(1.0 - a_from) * e64) / np.sqrt(a_from)
    out = (np.sqrt(a_to) * x0_hat + np.sqrt(1.0 - a_to) * e64).astype(x.dtype)
    return _restore_clean(out, x, mask)


def _predict(model: Model, x: np.ndarray, t: int, cond: int) -> np.ndarray:
    with no_grad():
        out = model(x, t, cond)
    return out.value if isinstance(out, DiffValue) else np.asarray(out)


def ddim_sample(model: Model, x_T, cond: int, steps: Sequence[int], schedule: NoiseSchedule, mask: FrameMask) -> np.ndarray:
    """Denoise from steps[0] down to 0. ``steps`` must be strictly decreasing."""
    steps = list(steps)
    if not steps:
        raise ValueError("ddim_sample: empty step list")
    if any(a <= b for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ValueError("ddim_sample: steps must be strictly decreasing and >= 1")
    x = np.array(x_T, copy=True)
    for k, t in enumerate(steps):
        t_prev = steps[k + 1] if k + 1 < len(steps) else 0
        x = ddim_step(x, _predict(model, x, t, cond), t, t_prev, schedule, mask)
    return x


def ddim_invert(
    model: Model,
    x0,
    cond: int,
    steps: Sequence[int],
    schedule: NoiseSchedule,
    mask: FrameMask,
    refine_iters: int = 0,
) -> np.ndarray:
    """Map data up to steps[-1] along the DDIM path. ``steps`` must be strictly increasing.

    Each move t_prev -> t uses the prediction at the current latent, queried at t.
    With ``refine_iters > 0`` the move is re-solved as a fixed point,
    x_t = up(x_prev, eps(x_t, t)), which is the exact reverse of the sampling step.
    """
    steps = list(steps)
    if not steps:
        raise ValueError("ddim_invert: empty step list")
    if any(a >= b for a, b in zip(steps, steps[1:])) or steps[0] < 1:
        raise ValueError("ddim_invert: steps must be strictly increasing and >= 1")
    if refine_iters < 0:
        raise ValueError(f"ddim_invert: refine_iters must be >= 0, got {refine_iters}")
    x = np.array(x0, copy=True)
    t_prev = 0
    for t in steps:
        x_next = ddim_step_inverse(x, _predict(model, x, t, cond), t_prev, t, schedule, mask)
        for _ in range(refine_iters):
            x_next = ddim_step_inverse(x, _predict(model, x_next, t, cond), t_prev, t, schedule, mask)
        x, t_prev = x_next, t
    return x
