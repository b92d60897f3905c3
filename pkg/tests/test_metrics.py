from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipation.metrics import EvalReport, evaluate_frames, kde_fit, kde_logpdf, mse_metric, tp_tn
from anticipation.pipeline import evaluate
from anticipation.predictor import OracleStub, PersistenceStub
from anticipation.worldsim import ScenarioSpec, generate


def test_mse_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(4, 4, 1))
    assert mse_metric(a, a) == 0.0
    assert mse_metric(a, a + 0.1) == pytest.approx(0.01, abs=1e-12)
    b = rng.uniform(size=(4, 4, 1))
    oracle = sum((a[i, j, 0] - b[i, j, 0]) ** 2 for i in range(4) for j in range(4)) / 16
    assert mse_metric(a, b) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        mse_metric(a, b[:3])


def test_tp_tn_examples():
    rng = np.random.default_rng(1)
    t = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    assert tp_tn(t, t) == (100.0, 100.0)
    half = np.zeros((8, 8))
    half[:4] = 1
    assert tp_tn(np.zeros((8, 8)), half) == (0.0, 100.0)
    # 5 occupied, 2 hit; 11 free, 10 hit
    target = np.zeros(16)
    target[:5] = 1
    pred = np.zeros(16)
    pred[:2] = 0.9
    pred[5] = 0.7
    tp, tn = tp_tn(pred.reshape(4, 4), target.reshape(4, 4))
    assert tp == 40.0
    assert tn == pytest.approx(100 * 10 / 11)


def test_tp_absent_when_no_occupied_pixels():
    tp, tn = tp_tn(np.zeros((4, 4)), np.zeros((4, 4)))
    assert tp is None and tn == 100.0
    with pytest.raises(ValueError):
        tp_tn(np.zeros((4, 4)), np.full((4, 4), 0.5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_tp_tn_permutation_invariant_and_mse_symmetric(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=(6, 6))
    t = (rng.uniform(size=(6, 6)) > 0.6).astype(float)
    perm = rng.permutation(36)
    assert tp_tn(p, t) == tp_tn(p.reshape(-1)[perm], t.reshape(-1)[perm])
    assert mse_metric(p, t) == mse_metric(t, p)


def test_kde_closed_forms():
    ref = np.random.default_rng(2).uniform(size=(1, 2, 2))
    m = kde_fit(ref)
    assert m.n == 1 and m.d == 4
    v = kde_logpdf(m, ref[0])
    assert v == pytest.approx(-2 * math.log(0.02 * math.pi), abs=1e-12)
    assert v == pytest.approx(5.534, abs=1e-3)

    refs = np.array([[-0.1, 0.0], [0.1, 0.0]])
    s2 = 0.01
    one = math.exp(-0.01 / (2 * s2)) / (2 * math.pi * s2)
    assert kde_logpdf(kde_fit(refs), np.zeros(2)) == pytest.approx(math.log(one), abs=1e-9)

    far = kde_logpdf(m, ref[0] + 100.0)
    assert math.isfinite(far) and far < -1e5
    assert kde_fit(np.stack([ref[0], ref[0]])).n == 2
    with pytest.raises(ValueError):
        kde_logpdf(m, np.zeros(5))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_kde_reference_beats_noisy_copy(seed):
    rng = np.random.default_rng(seed)
    refs = rng.uniform(size=(5, 3, 3))
    m = kde_fit(refs)
    x = refs[rng.integers(5)]
    assert kde_logpdf(m, x) >= kde_logpdf(m, x + rng.normal(0, 1.0, x.shape))
    single = kde_fit(refs[:1])
    assert kde_logpdf(single, refs[0]) >= kde_logpdf(single, refs[0] + rng.normal(0, 0.05, (3, 3)))


def test_kde_max_refs_subsamples():
    frames = np.random.default_rng(3).uniform(size=(50, 2, 2))
    assert kde_fit(frames, max_refs=10).n == 10


def test_report_csv_and_text():
    rng = np.random.default_rng(4)
    t = (rng.uniform(size=(3, 2, 4, 4, 1)) > 0.5).astype(float)
    rep = evaluate_frames(t, t, (1, 2), binary=True)
    assert rep.get(1, "mse") == 0.0 and rep.get(2, "tp") == 100.0
    lines = rep.to_csv().splitlines()
    assert lines[0] == "horizon,metric,mean,spread"
    assert "1,mse,0.0,0.0" in lines
    assert "k=1" in rep.to_text()
    assert EvalReport((1,)).get(1, "mse") is None
    with pytest.raises(ValueError):
        evaluate_frames(t, t, (3,))


@pytest.fixture(scope="module")
def urban_set():
    return [generate(ScenarioSpec(mode="urban", length=18, seed=s)) for s in range(3)]


def test_oracle_stub_is_perfect_on_binary(urban_set):
    rep = evaluate(OracleStub(), urban_set, (1, 5), t=4)
    for h in (1, 5):
        assert rep.get(h, "tp") == 100.0 and rep.get(h, "tn") == 100.0


def test_persistence_report_finite_and_deterministic(urban_set):
    a = evaluate(PersistenceStub(), urban_set, (1, 5), t=4)
    b = evaluate(PersistenceStub(), urban_set, (1, 5), t=4)
    assert all(np.isfinite(v[0]) for v in a.rows.values() if v[2])
    assert a.to_csv() == b.to_csv()
