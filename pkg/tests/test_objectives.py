import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvdpo import autodiff as ad
from hvdpo.denoiser import Denoiser, init_lora, init_params
from hvdpo.diffusion import FrameMask, make_linear_schedule
from hvdpo.gradcheck import TINY, check_dpo_pair_loss
from hvdpo.objectives import (
    CategoricalPolicy,
    NoiseErrorQuad,
    PreferenceSample,
    bt_probability,
    dpo_pair_loss,
    image_dpo_loss,
    implicit_reward,
    optimal_policy,
    policy_dpo_loss,
    video_dpo_loss,
    video_dpo_loss_terms,
)

LN2 = math.log(2.0)


def test_bt_probability():
    assert bt_probability(1.3, 1.3) == 0.5
    assert bt_probability(math.log(3.0), 0.0) == pytest.approx(0.75, abs=1e-12)
    assert bt_probability(50.0, 0.0) >= 1 - 1e-20
    assert 0 < bt_probability(-800.0, 0.0) < 1e-300 or bt_probability(-800.0, 0.0) == 0.0


def test_implicit_reward():
    pi = CategoricalPolicy(np.array([[0.8, 0.2]]))
    ref = CategoricalPolicy(np.array([[0.4, 0.6]]))
    assert implicit_reward(ref, ref, 0, 1, 3.0) == 0.0
    assert implicit_reward(pi, ref, 0, 0, 2.0) == pytest.approx(1.3863, abs=1e-4)
    assert implicit_reward(pi, ref, 0, 0, 4.0) == pytest.approx(2 * implicit_reward(pi, ref, 0, 0, 2.0), rel=1e-12)
    with pytest.raises(ValueError):
        implicit_reward(CategoricalPolicy(np.array([[1.0, 0.0]])), ref, 0, 1, 1.0)


def test_policy_loss_anchors():
    ref = CategoricalPolicy.uniform(3, 4)
    samples = [PreferenceSample(0, 1, 2), PreferenceSample(2, 3, 0), PreferenceSample(1, 0, 1)]
    assert abs(policy_dpo_loss(ref, ref, samples, 0.7).item() - LN2) < 1e-6
    pi = CategoricalPolicy.from_logits(np.random.default_rng(0).normal(size=(3, 4)))
    assert abs(policy_dpo_loss(pi, ref, samples, 0.0).item() - LN2) < 1e-6
    toy = policy_dpo_loss(CategoricalPolicy(np.array([[0.8, 0.2]])), CategoricalPolicy.uniform(1, 2), [PreferenceSample(0, 0, 1)], 1.0)
    assert toy.item() == pytest.approx(-math.log(0.8), abs=1e-12)
    assert toy.item() == pytest.approx(0.22314, abs=1e-4)


def test_policy_loss_descent_at_reference():
    ref = CategoricalPolicy(np.array([[0.3, 0.5, 0.2], [0.25, 0.25, 0.5]]))
    samples = [PreferenceSample(0, 2, 1), PreferenceSample(1, 0, 2)]
    logits = ad.parameter(ref.logits())
    loss = policy_dpo_loss(logits, ref, samples, 1.0)
    ad.backward(loss)
    assert np.abs(logits.grad).max() > 0
    stepped = logits.value - 1e-3 * logits.grad
    assert policy_dpo_loss(ad.as_value(stepped), ref, samples, 1.0).item() < loss.item()


def test_policy_loss_two_response_convergence():
    ref = CategoricalPolicy(np.array([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]]))
    samples = [PreferenceSample(0, 1, 0), PreferenceSample(1, 0, 1), PreferenceSample(2, 0, 1)]
    logits = ref.logits()
    for _ in range(500):
        p = ad.parameter(logits)
        ad.backward(policy_dpo_loss(p, ref, samples, 0.5))
        logits = logits - 1.0 * p.grad
    pi = CategoricalPolicy.from_logits(logits)
    for s in samples:
        assert implicit_reward(pi, ref, s.context, s.winner, 0.5) > implicit_reward(pi, ref, s.context, s.loser, 0.5)


def test_optimal_policy_examples():
    ref = CategoricalPolicy(np.array([[0.2, 0.3, 0.5]]))
    np.testing.assert_allclose(optimal_policy(ref, [[2.0, 2.0, 2.0]], 0.3).probs, ref.probs, atol=1e-15)
    two = optimal_policy(CategoricalPolicy.uniform(1, 2), [[1.0, 0.0]], 1.0).probs[0]
    np.testing.assert_allclose(two, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
    np.testing.assert_allclose(two, [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_allclose(optimal_policy(ref, [[5.0, -3.0, 1.0]], 1e6).probs, ref.probs, atol=1e-5)
    with pytest.raises(ValueError):
        optimal_policy(ref, [[1.0, 0.0, 0.0]], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 20.0), st.floats(-100, 100))
def test_optimal_policy_normalized_and_shift_invariant(seed, beta, c):
    rng = np.random.default_rng(seed)
    ref = CategoricalPolicy.from_logits(rng.normal(size=(2, 5)))
    r = rng.normal(size=(2, 5)) * 3
    a = optimal_policy(ref, r, beta).probs
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(optimal_policy(ref, r + c, beta).probs, a, atol=1e-9)


def test_optimal_policy_rewards_recover():
    # rewards implied by pi* equal r up to a per-context constant
    ref = CategoricalPolicy(np.array([[0.1, 0.6, 0.3]]))
    r = np.array([[0.4, -1.0, 2.0]])
    pi = optimal_policy(ref, r, 0.5)
    implied = np.array([implicit_reward(pi, ref, 0, y, 0.5) for y in range(3)])
    np.testing.assert_allclose(implied - implied[0], r[0] - r[0, 0], atol=1e-12)


def test_image_dpo_loss():
    assert image_dpo_loss(0.3, 0.3, 5.0) == pytest.approx(LN2, abs=1e-15)
    assert image_dpo_loss(math.log(4.0), 0.0, 1.0) == pytest.approx(0.22314, abs=1e-4)
    assert image_dpo_loss(0.5, 0.0, 2.0) == pytest.approx(image_dpo_loss(1.0, 0.0, 1.0), abs=1e-15)


def test_video_loss_terms_anchors():
    assert video_dpo_loss_terms(NoiseErrorQuad(0.4, 0.4, 0.9, 0.9), 3.0) == pytest.approx(LN2, abs=1e-6)
    got = video_dpo_loss_terms(NoiseErrorQuad(0.2, 0.5, 0.5, 0.2), 1.0)
    assert got == pytest.approx(-math.log(1 / (1 + math.exp(-0.6))), abs=1e-12)
    assert got == pytest.approx(0.43749, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_role_swap_convexity(s):
    L = lambda m: -math.log(1 / (1 + math.exp(-m)))
    q = NoiseErrorQuad(30.0, 30.0 + s, 30.0, 30.0)
    swapped = NoiseErrorQuad(30.0, 30.0, 30.0, 30.0 + s)
    assert video_dpo_loss_terms(q, 1.0) == pytest.approx(L(s), rel=1e-9, abs=1e-12)
    assert video_dpo_loss_terms(swapped, 1.0) == pytest.approx(L(-s), rel=1e-9, abs=1e-12)
    assert video_dpo_loss_terms(q, 1.0) + video_dpo_loss_terms(swapped, 1.0) >= 2 * LN2 - 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.floats(0.01, 1.0), st.floats(0.1, 5))
def test_video_loss_monotone(vals, d, beta):
    ewt, ewr, elt, elr = vals
    base = video_dpo_loss_terms(NoiseErrorQuad(ewt, ewr, elt, elr), beta)
    # better winner fit (larger e_wref - e_wtheta) lowers the loss
    assert video_dpo_loss_terms(NoiseErrorQuad(ewt, ewr + d, elt, elr), beta) <= base
    # worse loser fit (larger e_ltheta - e_lref) lowers the loss
    assert video_dpo_loss_terms(NoiseErrorQuad(ewt, ewr, elt + d, elr), beta) <= base


def test_quad_validation():
    with pytest.raises(ValueError):
        NoiseErrorQuad(-0.1, 0, 0, 0)
    with pytest.raises(ValueError):
        NoiseErrorQuad(float("nan"), 0, 0, 0)


def test_video_dpo_loss_matches_scalar_form():
    ewt, elt = ad.parameter(np.array([0.2])), ad.parameter(np.array([0.5]))
    loss = video_dpo_loss(ewt, 0.5, elt, 0.2, 1.0)
    assert loss.item() == pytest.approx(0.4374879, abs=1e-6)
    ad.backward(loss)
    s = 1 / (1 + math.exp(-0.6))
    # d/d e_wtheta of -log sigma(-beta(...)) = beta * (1 - sigma)
    assert ewt.grad[0] == pytest.approx(1 - s, rel=1e-9)
    assert elt.grad[0] == pytest.approx(-(1 - s), rel=1e-9)


def _pair_setup(seed=0):
    rng = np.random.default_rng(seed)
    shape = TINY.video_shape
    base = init_params(seed, TINY)
    return (
        base,
        rng.uniform(-1, 1, shape).astype(np.float32),
        rng.uniform(-1, 1, shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
    )


def test_pair_loss_at_lora_init_is_ln2():
    base, w, l, ew, el = _pair_setup()
    lora = init_lora(1, TINY, rank=2)
    theta = Denoiser(TINY, base, lora)
    res = dpo_pair_loss(theta, Denoiser(TINY, base), w, l, 321, ew, el, 1, make_linear_schedule(), FrameMask.first_frame(2), 0.1)
    assert res.margin == 0.0
    assert abs(res.loss.item() - LN2) < 1e-6


def test_pair_loss_deterministic_and_frozen_ref_gets_no_grad():
    base, w, l, ew, el = _pair_setup(3)
    lora = init_lora(4, TINY, rank=2)
    lora.B = {k: np.full_like(v, 0.3) for k, v in lora.B.items()}
    sched, mask = make_linear_schedule(), FrameMask.first_frame(2)
    ref_leaves = {k: ad.parameter(v) for k, v in base.items()}
    vals = {k: ad.parameter(v) for k, v in lora.tensors().items()}
    theta = Denoiser(TINY, base, lora, vals)
    res = dpo_pair_loss(theta, Denoiser(TINY, ref_leaves), w, l, 400, ew, el, 0, sched, mask, 5.0)
    ad.backward(res.loss)
    assert all(v.grad is None for v in ref_leaves.values())
    assert any(np.abs(v.grad).max() > 0 for v in vals.values())
    again = dpo_pair_loss(Denoiser(TINY, base, lora), Denoiser(TINY, base), w, l, 400, ew, el, 0, sched, mask, 5.0)
    assert again.loss.item() == res.loss.item()


def test_pair_loss_gradients_match_finite_differences():
    res = check_dpo_pair_loss(seed=2, instances=3)
    assert res.max_rel_error < 1e-4, res


def test_pair_loss_shape_mismatch():
    base, w, l, ew, el = _pair_setup()
    m = Denoiser(TINY, base)
    with pytest.raises(ValueError):
        dpo_pair_loss(m, m, w, l[:1], 5, ew, el, 0, make_linear_schedule(), FrameMask.first_frame(2), 0.1)
