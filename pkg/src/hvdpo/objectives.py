"""Preference objectives: Bradley-Terry, policy DPO and its closed-form optimum, image and video DPO."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .diffusion import FrameMask, NoiseSchedule, masked_mse, q_sample


def _log_sigmoid(x: float) -> float:
    # log(sigmoid(x)) without overflow on either tail
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def bt_probability(r_w: float, r_l: float) -> float:
    """P(winner preferred) under Bradley-Terry, as sigmoid(r_w - r_l)."""
    return _sigmoid(r_w - r_l)


# --------------------------------------------------------------------------- categorical policies


@dataclass(frozen=True)
class CategoricalPolicy:
    """probs[x, y] = pi(y | x); one row per context."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("CategoricalPolicy rows must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, contexts: int, responses: int) -> "CategoricalPolicy":
        return cls(np.full((contexts, responses), 1.0 / responses))

    @classmethod
    def from_logits(cls, logits) -> "CategoricalPolicy":
        z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return cls(e / e.sum(axis=1, keepdims=True))

    def logits(self) -> np.ndarray:
        if np.any(self.probs <= 0):
            raise ValueError("zero probability has no finite logit")
        return np.log(self.probs)


@dataclass(frozen=True)
class PreferenceSample:
    context: int
    winner: int
    loser: int

    def __post_init__(self):
        if self.winner == self.loser:
            raise ValueError("winner and loser must differ")


def implicit_reward(pi: CategoricalPolicy, pi_ref: CategoricalPolicy, x: int, y: int, beta: float) -> float:
    p, q = pi.probs[x, y], pi_ref.probs[x, y]
    if p <= 0 or q <= 0:
        raise ValueError(f"implicit_reward: zero probability at context {x}, response {y}")
    return beta * math.log(p / q)


def policy_dpo_loss(policy, pi_ref: CategoricalPolicy, samples: Sequence[PreferenceSample], beta: float) -> DiffValue:
    """Mean of -log sigmoid(beta*log(pi_w/ref_w) - beta*log(pi_l/ref_l)).

    ``policy`` is either a CategoricalPolicy or a (contexts x responses)
    DiffValue of logits; gradients flow into the logits.
    """
    if not samples:
        raise ValueError("policy_dpo_loss: no samples")
    if isinstance(policy, CategoricalPolicy):
        logits = ad.as_value(policy.logits())
    else:
        logits = ad.as_value(policy)
    ref = pi_ref.probs
    if np.any(ref <= 0):
        raise ValueError("policy_dpo_loss: reference policy has zero probabilities")
    if logits.shape != ref.shape:
        raise ad.ShapeError(f"policy_dpo_loss: shape mismatch {logits.shape} vs {ref.shape}")
    log_pi = ad.log(ad.softmax(logits))
    log_ref = np.log(ref)
    n_ctx, n_resp = ref.shape

    # selector matrices pick log pi(y_w|x) - log pi(y_l|x) per sample
    sel = np.zeros((len(samples), n_ctx * n_resp), dtype=logits.dtype)
    offset = np.zeros(len(samples), dtype=np.float64)
    for k, s in enumerate(samples):
        sel[k, s.context * n_resp + s.winner] += 1.0
        sel[k, s.context * n_resp + s.loser] -= 1.0
        offset[k] = log_ref[s.context, s.winner] - log_ref[s.context, s.loser]
    diff = ad.matmul(ad.as_value(sel), ad.reshape(log_pi, (n_ctx * n_resp, 1)))
    diff = ad.subtract(diff, ad.as_value(offset.reshape(-1, 1).astype(logits.dtype)))
    return ad.scale(ad.mean_all(ad.log(ad.sigmoid(ad.scale(diff, beta)))), -1.0)


def optimal_policy(pi_ref: CategoricalPolicy, rewards, beta: float) -> CategoricalPolicy:
    """pi*(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x), Z summed explicitly."""
    if beta <= 0:
        raise ValueError(f"optimal_policy: beta must be positive, got {beta}")
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    ref = pi_ref.probs
    if r.shape != ref.shape:
        raise ValueError(f"optimal_policy: rewards shape {r.shape} vs policy {ref.shape}")
    # per-row shift leaves pi* unchanged and keeps exp in range
    w = ref * np.exp((r - r.max(axis=1, keepdims=True)) / beta)
    Z = w.sum(axis=1, keepdims=True)
    return CategoricalPolicy(w / Z)


# --------------------------------------------------------------------------- diffusion DPO


def image_dpo_loss(delta_w: float, delta_l: float, beta: float) -> float:
    """-log sigmoid(beta * (delta_w - delta_l)) for log-likelihood ratios vs the reference."""
    return -_log_sigmoid(beta * (delta_w - delta_l))


@dataclass(frozen=True)
class NoiseErrorQuad:
    e_w_theta: float
    e_w_ref: float
    e_l_theta: float
    e_l_ref: float

    def __post_init__(self):
        for v in (self.e_w_theta, self.e_w_ref, self.e_l_theta, self.e_l_ref):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"NoiseErrorQuad entries must be finite and >= 0, got {v}")


def dpo_margin(e_w_theta, e_w_ref, e_l_theta, e_l_ref, beta: float):
    """-beta * [(e_w_theta - e_w_ref) - (e_l_theta - e_l_ref)]; positive when theta favours winners."""
    return -beta * ((e_w_theta - e_w_ref) - (e_l_theta - e_l_ref))


def video_dpo_loss_terms(q: NoiseErrorQuad, beta: float) -> float:
    return -_log_sigmoid(dpo_margin(q.e_w_theta, q.e_w_ref, q.e_l_theta, q.e_l_ref, beta))


def video_dpo_loss(e_w_theta: DiffValue, e_w_ref, e_l_theta: DiffValue, e_l_ref, beta: float) -> DiffValue:
    """Differentiable form of video_dpo_loss_terms; reference errors enter as constants."""
    w = ad.subtract(e_w_theta, ad.as_value(np.asarray(e_w_ref, dtype=e_w_theta.dtype).reshape(1)))
    l = ad.subtract(e_l_theta, ad.as_value(np.asarray(e_l_ref, dtype=e_l_theta.dtype).reshape(1)))
    margin = ad.scale(ad.subtract(w, l), -beta)
    return ad.scale(ad.log(ad.sigmoid(margin)), -1.0)


@dataclass
class PairLoss:
    loss: DiffValue
    quad: NoiseErrorQuad
    margin: float


def dpo_pair_loss(
    model_theta,
    model_ref,
    winner,
    loser,
    t: int,
    eps_w,
    eps_l,
    cond: int,
    schedule: NoiseSchedule,
    mask: FrameMask,
    beta: float,
) -> PairLoss:
    """Noise both videos at the same t, score theta and the frozen reference on each.

    Errors are mean squares over the noised frames. The reference passes run
    without recording a graph, so nothing flows back into its parameters.
    """
    winner = np.asarray(winner)
    loser = np.asarray(loser)
    if winner.shape != loser.shape:
        raise ValueError(f"dpo_pair_loss: winner {winner.shape} and loser {loser.shape} differ in shape")
    vw = q_sample(winner, t, eps_w, schedule, mask)
    vl = q_sample(loser, t, eps_l, schedule, mask)
    e_wt = masked_mse(ad.as_value(model_theta(vw, t, cond)), eps_w, mask)
    e_lt = masked_mse(ad.as_value(model_theta(vl, t, cond)), eps_l, mask)
    with ad.no_grad():
        e_wr = masked_mse(ad.as_value(model_ref(vw, t, cond)), eps_w, mask).item()
        e_lr = masked_mse(ad.as_value(model_ref(vl, t, cond)), eps_l, mask).item()
    loss = video_dpo_loss(e_wt, e_wr, e_lt, e_lr, beta)
    quad = NoiseErrorQuad(e_wt.item(), e_wr, e_lt.item(), e_lr)
    margin = dpo_margin(quad.e_w_theta, quad.e_w_ref, quad.e_l_theta, quad.e_l_ref, beta)
    return PairLoss(loss=loss, quad=quad, margin=margin)
