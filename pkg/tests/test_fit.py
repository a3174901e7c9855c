import math

import numpy as np
import pytest

from relrisk.data import Dataset, TreatmentCoding
from relrisk.errors import DivergenceError, ValidationError
from relrisk.fit import FitOptions, fit_gop, fit_monotone, predict
from relrisk.likelihood import loglik_monotone, score_monotone
from relrisk.mc import SimConfig, gen_replicate
from relrisk.results import FitResult


@pytest.fixture(scope="module")
def mono5000():
    return gen_replicate(SimConfig("monotone", n=5000, reps=1, seed=11), 0)


@pytest.fixture(scope="module")
def gop5000():
    return gen_replicate(SimConfig("gop", n=5000, reps=1, seed=11), 0)


@pytest.fixture(scope="module")
def mono500():
    return gen_replicate(SimConfig("monotone", n=500, reps=1, seed=5), 0)


def test_monotone_recovers_truth(mono5000):
    res = fit_monotone(mono5000)
    assert res.converged
    assert np.all(np.abs(res.block("gamma") - [0.0, 1.0]) < 3 * res.block_se("gamma"))
    assert np.all(np.abs(res.block("beta") - [1.0, -0.5]) < 3 * res.block_se("beta"))
    assert res.diagnostics["score_norm"] < 1e-6


def test_gop_recovers_truth(gop5000):
    res = fit_gop(gop5000)
    assert res.converged
    assert np.all(np.abs(res.block("alpha1") - [0.0, 1.0]) < 3 * res.block_se("alpha1"))
    assert np.all(np.abs(res.block("alpha2") - [0.0, 2.0]) < 3 * res.block_se("alpha2"))


def test_score_zero_at_mle(mono500):
    res = fit_monotone(mono500)
    g, b = score_monotone(res.monotone_params(), mono500)
    assert max(np.max(np.abs(g)), np.max(np.abs(b))) < 1e-6


def test_ascent_trace(mono500):
    trace = fit_monotone(mono500).diagnostics["loglik_trace"]
    assert all(b >= a - 1e-10 * max(1.0, abs(a)) for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_constant_outcome_diverges(mono500, value):
    ds = Dataset(np.full(mono500.n, value), mono500.z, mono500.v_rr, mono500.v_op, coding=mono500.coding)
    with pytest.raises(DivergenceError):
        fit_monotone(ds)


def test_multistart_stability(mono500):
    base = fit_monotone(mono500)
    rng = np.random.default_rng(3)
    for _ in range(10):
        start = base.estimates + rng.normal(0, 0.5, base.estimates.size)
        res = fit_monotone(mono500, start=start)
        assert res.converged
        assert res.loglik == pytest.approx(base.loglik, abs=1e-6)
        np.testing.assert_allclose(res.estimates, base.estimates, atol=1e-4)


def test_multistart_option_picks_best(mono500):
    one = fit_monotone(mono500)
    many = fit_monotone(mono500, opts=FitOptions(starts=4))
    assert many.loglik >= one.loglik - 1e-9
    assert many.diagnostics["starts"] == 4


def test_gop_k1_matches_binary_model():
    ds = gen_replicate(SimConfig("gop", n=800, reps=1, seed=4), 0)
    keep = ds.z <= 1
    cat = ds.subset(keep, coding=TreatmentCoding("categorical", K=1))
    cont = ds.subset(keep, coding=TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=1.0))
    a, b = fit_gop(cat), fit_monotone(cont)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-8)
    np.testing.assert_allclose(a.block("alpha1"), b.block("gamma"), atol=1e-5)


def test_gop_null_data():
    rng = np.random.default_rng(12)
    n = 3000
    u = rng.uniform(-2, 2, n)
    V = np.column_stack([np.ones(n), u])
    z = rng.integers(0, 3, n).astype(float)
    y = (rng.random(n) < 0.5).astype(float)
    ds = Dataset(y, z, V, V, coding=TreatmentCoding("categorical", K=2))
    res = fit_gop(ds)
    assert np.all(np.abs(res.estimates) < 3 * res.se)
    assert res.loglik == pytest.approx(n * math.log(0.5), abs=15)


def test_rescaling_equivariance(mono500):
    res = fit_monotone(mono500)
    c = 4.0
    V = mono500.v_rr * [1.0, c]
    W = mono500.v_op * [1.0, c]
    scaled = Dataset(mono500.y, mono500.z, V, W, coding=mono500.coding)
    res2 = fit_monotone(scaled)
    assert res2.loglik == pytest.approx(res.loglik, abs=1e-8)
    np.testing.assert_allclose(res2.estimates, res.estimates / [1, c, 1, c], atol=1e-7)
    p1 = predict(res, mono500, [0.0, 1.0, 2.0]).p
    p2 = predict(res2, scaled, [0.0, 1.0, 2.0]).p
    np.testing.assert_allclose(p1, p2, atol=1e-8)


def test_predict_rr_identity(mono500):
    res = fit_monotone(mono500)
    grid = [0.0, 0.5, 1.3, 2.0]
    p = predict(res, mono500, grid).p
    theta = mono500.v_rr @ res.block("gamma")
    for j, z in enumerate(grid):
        np.testing.assert_allclose(p[:, j] / p[:, 0], np.exp(theta * z), rtol=1e-10)
    assert np.all((p > 0) & (p < 1))


def test_predict_out_of_range(mono500):
    with pytest.raises(ValidationError):
        predict(fit_monotone(mono500), mono500, [2.5])


def test_predict_gop_levels(gop5000):
    res = fit_gop(gop5000)
    pred = predict(res, gop5000, ["0", "2"])
    assert pred.p.shape == (gop5000.n, 2)
    ratio = pred.p[:, 1] / pred.p[:, 0]
    np.testing.assert_allclose(ratio, np.exp(gop5000.v_rr @ res.block("alpha2")), rtol=1e-10)
    with pytest.raises(ValidationError):
        predict(res, gop5000, ["7"])


def test_result_json_roundtrip(mono500):
    res = fit_monotone(mono500)
    back = FitResult.from_json(res.to_json())
    np.testing.assert_array_equal(back.estimates, res.estimates)
    np.testing.assert_array_equal(back.inference.vcov, res.inference.vcov)
    assert back.loglik == res.loglik and back.converged and back.tolerances == res.tolerances
    np.testing.assert_allclose(predict(back, mono500, [1.0]).p, predict(res, mono500, [1.0]).p, rtol=0)


def test_loglik_reported_matches(mono500):
    res = fit_monotone(mono500)
    assert res.loglik == pytest.approx(loglik_monotone(res.monotone_params(), mono500), rel=1e-14)
