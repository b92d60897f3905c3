from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipation import diffcalc as dc
from anticipation.diffcalc import Tensor
from anticipation.losses import (
    SSIM_C1,
    GaussianCode,
    default_lambda,
    gaussian_kl,
    horizon_loss,
    recon_divergence,
    ssim,
    step_loss,
)


def _code(mean, var):
    return GaussianCode.from_var(mean, var)


def test_mse_zero_and_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(4, 4, 1)), rng.uniform(size=(4, 4, 1))
    assert float(recon_divergence(a, a).data) == 0.0
    oracle = sum((b[i, j, 0] - a[i, j, 0]) ** 2 for i in range(4) for j in range(4)) / 16
    assert float(recon_divergence(a, b).data) == pytest.approx(oracle, abs=1e-12)


def test_ce_single_pixel_and_oracle():
    v = recon_divergence(np.ones((1, 1, 1)), np.full((1, 1, 1), 0.5), "ce")
    assert float(v.data) == pytest.approx(0.6931, abs=1e-4)
    rng = np.random.default_rng(1)
    t = (rng.uniform(size=(4, 4, 1)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, (4, 4, 1))
    oracle = -sum(t[i, j, 0] * math.log(p[i, j, 0]) + (1 - t[i, j, 0]) * math.log(1 - p[i, j, 0])
                  for i in range(4) for j in range(4)) / 16
    assert float(recon_divergence(t, p, "ce").data) == pytest.approx(oracle, abs=1e-12)


def test_ce_clamps_extremes():
    v = recon_divergence(np.ones((2, 2, 1)), np.zeros((2, 2, 1)), "ce")
    assert math.isfinite(float(v.data))


def test_recon_shape_mismatch():
    with pytest.raises(dc.ShapeError, match="shape mismatch"):
        recon_divergence(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)))


def test_ssim_identities():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(16, 16, 2))
    assert float(ssim(x, x).data) == pytest.approx(1.0, abs=1e-9)
    v = float(ssim(np.zeros((16, 16, 1)), np.ones((16, 16, 1))).data)
    assert v == pytest.approx(SSIM_C1 / (1 + SSIM_C1), abs=1e-9)
    y = rng.uniform(size=(16, 16, 2))
    assert float(ssim(x, y).data) == float(ssim(y, x).data)


def test_ssim_too_small():
    with pytest.raises(dc.ShapeError):
        ssim(np.zeros((6, 6, 1)), np.zeros((6, 6, 1)))


def test_ssim_translation_invariant_in_interior():
    rng = np.random.default_rng(3)
    big_a, big_b = rng.uniform(size=(30, 30, 1)), rng.uniform(size=(30, 30, 1))
    a1, b1 = big_a[2:22, 3:23], big_b[2:22, 3:23]
    a2, b2 = big_a[2:22, 3:23].copy(), big_b[2:22, 3:23].copy()
    # same content at a different offset in a larger canvas gives the same mean over matched windows
    pad_a = np.zeros((26, 27, 1))
    pad_b = np.zeros((26, 27, 1))
    pad_a[4:24, 5:25], pad_b[4:24, 5:25] = a2, b2
    inner = float(ssim(a1, b1).data)
    shifted = float(ssim(pad_a[4:24, 5:25], pad_b[4:24, 5:25]).data)
    assert inner == shifted


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_ssim_bounds(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(10, 12, 2)) ** rng.uniform(0.2, 5)
    b = rng.uniform(size=(10, 12, 2)) ** rng.uniform(0.2, 5)
    v = float(ssim(a, b).data)
    assert -1.0 <= v <= 1.0


def test_kl_examples():
    assert float(gaussian_kl(_code([[1.0]], [[1.0]]), _code([[0.0]], [[1.0]])).data) == pytest.approx(0.5, abs=1e-12)
    rng = np.random.default_rng(4)
    q = _code(rng.normal(size=(1, 8)), rng.uniform(0.2, 2, (1, 8)))
    assert float(gaussian_kl(q, q).data) == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(5)
    mq, vq = rng.normal(size=8), rng.uniform(0.3, 2, 8)
    mp, vp = rng.normal(size=8), rng.uniform(0.3, 2, 8)
    kl = float(gaussian_kl(_code(mq[None], vq[None]), _code(mp[None], vp[None])).data)
    x = mq + np.sqrt(vq) * rng.standard_normal((1_000_000, 8))
    logq = -0.5 * (np.log(2 * np.pi * vq) + (x - mq) ** 2 / vq)
    logp = -0.5 * (np.log(2 * np.pi * vp) + (x - mp) ** 2 / vp)
    mc = float(np.mean(np.sum(logq - logp, axis=1)))
    assert kl == pytest.approx(mc, rel=0.01)


def test_kl_rejects_bad_variance():
    with pytest.raises(ValueError):
        _code([[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        _code([[0.0]], [[-1.0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), d=st.integers(1, 16))
def test_kl_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    q = _code(rng.normal(0, 3, (2, d)), np.exp(rng.normal(0, 2, (2, d))))
    p = _code(rng.normal(0, 3, (2, d)), np.exp(rng.normal(0, 2, (2, d))))
    assert float(gaussian_kl(q, p).data) >= -1e-12


def test_step_loss_perfect_is_zero():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(12, 12, 2))
    q = _code(rng.normal(size=(1, 4)), rng.uniform(0.5, 1, (1, 4)))
    br = step_loss(x, x, q, q, 0.05)
    assert float(br.total.data) == pytest.approx(0.0, abs=1e-12)


def test_step_loss_breakdown_consistent():
    rng = np.random.default_rng(7)
    t, p = rng.uniform(size=(12, 12, 2)), rng.uniform(size=(12, 12, 2))
    q = _code(rng.normal(size=(1, 4)), rng.uniform(0.5, 1, (1, 4)))
    pr = _code(rng.normal(size=(1, 4)), rng.uniform(0.5, 1, (1, 4)))
    br = step_loss(t, p, q, pr, 0.05)
    total = float(br.rec.data) + 0.05 * (1 - float(br.ssim.data)) + float(br.kl.data)
    assert float(br.total.data) == pytest.approx(total, abs=1e-6)
    assert float(br.kl.data) >= 0 and -1 <= float(br.ssim.data) <= 1
    br0 = step_loss(t, p, q, pr, 0.0)
    assert float(br0.total.data) == float(br0.rec.data) + float(br0.kl.data)


def test_dl_loss_uses_raw_for_d_and_clipped_for_ssim():
    t = np.ones((8, 8, 1))
    raw = np.full((8, 8, 1), 1.2)
    br = step_loss(t, raw, None, None, 0.1, variant="dl")
    assert float(br.rec.data) == pytest.approx(0.04)
    assert float(br.ssim.data) == pytest.approx(1.0)


def test_horizon_loss_sum_and_monotone():
    rng = np.random.default_rng(8)
    steps = [step_loss(rng.uniform(size=(8, 8, 1)), rng.uniform(size=(8, 8, 1)), None, None, 0.05) for _ in range(4)]
    assert float(horizon_loss(steps[:1], 1).data) == float(steps[0].total.data)
    vals = [float(horizon_loss(steps[:k], k).data) for k in range(1, 5)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(sum(float(s.total.data) for s in steps))
    with pytest.raises(ValueError):
        horizon_loss(steps, 3)


def test_default_lambda():
    assert default_lambda("real") == 0.05
    assert default_lambda("binary") == 0.1


def test_loss_terms_differentiable():
    rng = np.random.default_rng(9)
    t = Tensor(rng.uniform(size=(2, 9, 9, 1)))
    p = Tensor(rng.uniform(0.1, 0.9, (2, 9, 9, 1)), requires_grad=True)
    qm, qv = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    pm, pv = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    for mode in ("mse", "ce"):
        rep = dc.grad_check(lambda: step_loss(t, p, GaussianCode(qm, qv), GaussianCode(pm, pv), 0.3, mode=mode).total,
                            [p, qm, qv, pm, pv], step=1e-6)
        assert rep.passed, rep
