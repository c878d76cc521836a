"""Finite-difference verification of every primitive and of the end-to-end video DPO loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .denoiser import Denoiser, DenoiserConfig, init_lora, init_params
from .diffusion import FrameMask, make_linear_schedule
from .objectives import dpo_pair_loss

TOLERANCE = 1e-4
STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _readout(out: ad.DiffValue, w: np.ndarray) -> ad.DiffValue:
    # random linear functional so every output coordinate matters
    return ad.sum_all(ad.multiply(out, ad.as_value(w)))


def _case(kind: str, rng: np.random.Generator):
    """(inputs, fn) where fn maps leaf DiffValues to the primitive's output."""
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)
    if kind in ("add", "subtract", "multiply"):
        return [u(3, 4), u(3, 4)], lambda a, b: ad.apply_primitive(kind, a, b)
    if kind == "scale":
        c = float(rng.uniform(-2, 2))
        return [u(3, 4)], lambda a: ad.scale(a, c)
    if kind == "matmul":
        return [u(3, 4), u(4, 2)], ad.matmul
    if kind == "conv2d":
        return [u(2, 2, 4, 4), u(3, 2, 3, 3)], ad.conv2d
    if kind in ("softmax", "sigmoid", "exp", "transpose"):
        return [u(3, 5)], lambda a: ad.apply_primitive(kind, a)
    if kind == "log":
        return [rng.uniform(0.5, 1.5, size=(3, 4))], ad.log
    if kind in ("sum", "mean", "squared_norm"):
        return [u(3, 4)], lambda a: ad.apply_primitive(kind, a)
    if kind == "reshape":
        return [u(3, 4)], lambda a: ad.reshape(a, (2, 6))
    if kind == "concatenate":
        return [u(3, 2), u(3, 4)], lambda a, b: ad.concatenate([a, b], axis=1)
    if kind == "take":
        return [u(5, 3)], lambda a: ad.take(a, 1, 4, axis=0)
    if kind == "broadcast_to":
        return [u(3, 1)], lambda a: ad.broadcast_to(a, (3, 4))
    raise KeyError(kind)


def check_primitive(kind: str, seed: int, instances: int = 20) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        inputs, fn = _case(kind, rng)
        with ad.no_grad():
            shape = fn(*[ad.DiffValue(x) for x in inputs]).shape
        w = rng.uniform(-1.0, 1.0, size=shape)
        err = ad.check_gradients(lambda leaves: _readout(fn(*leaves), w), inputs, STEP)
        worst = max(worst, err)
    return CheckResult(kind, instances, worst, time.perf_counter() - t0)


TINY = DenoiserConfig(frames=2, channels=2, height=4, width=4, hidden=4, time_dim=4, n_conditions=2, heads=1)


def dpo_loss_case(seed: int, config: DenoiserConfig = TINY, rank: int = 2):
    """Tiny model plus fixed pair data; returns (lora arrays, loss builder)."""
    rng = np.random.default_rng(seed)
    base = {k: v.astype(np.float64) for k, v in init_params(seed, config).items()}
    lora = init_lora(seed + 1, config, rank=rank, alpha=2.0)
    # move B off zero so gradients wrt A are non-trivial
    for name in lora.B:
        lora.A[name] = lora.A[name].astype(np.float64)
        lora.B[name] = rng.uniform(-0.5, 0.5, size=lora.B[name].shape)
    names = sorted(lora.tensors())
    arrays = [lora.tensors()[n] for n in names]
    shape = config.video_shape
    winner, loser = rng.uniform(-1, 1, size=shape), rng.uniform(-1, 1, size=shape)
    eps_w, eps_l = rng.standard_normal(shape), rng.standard_normal(shape)
    t = int(rng.integers(1, 1001))
    cond = int(rng.integers(config.n_conditions))
    schedule = make_linear_schedule()
    mask = FrameMask.first_frame(config.frames)
    ref = Denoiser(config, base)

    def build(leaves):
        theta = Denoiser(config, base, lora, dict(zip(names, leaves)))
        # beta=5 keeps the sigmoid argument away from the flat region
        return dpo_pair_loss(theta, ref, winner, loser, t, eps_w, eps_l, cond, schedule, mask, 5.0).loss

    return arrays, build


def check_dpo_pair_loss(seed: int, instances: int = 20) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(instances):
        arrays, build = dpo_loss_case(seed * 1000 + k)
        worst = max(worst, ad.check_gradients(build, arrays, STEP))
    return CheckResult("dpo_pair_loss", instances, worst, time.perf_counter() - t0)


def run_suite(seed: int, instances: int = 20, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for kind in ad.PRIMITIVES:
        results.append(check_primitive(kind, seed, instances))
        if log:
            log(_line(results[-1]))
    results.append(check_dpo_pair_loss(seed, instances))
    if log:
        log(_line(results[-1]))
    return results


def _line(r: CheckResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    return f"{status} {r.name:<14} n={r.instances} max_rel_err={r.max_rel_error:.3e} ({r.seconds:.2f}s)"
