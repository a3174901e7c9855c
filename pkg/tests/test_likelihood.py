import math

import numpy as np
import pytest

from helpers import central_diff, random_gop, random_monotone, rel_err
from relrisk.data import Dataset, TreatmentCoding
from relrisk.errors import SingularInformationError
from relrisk.likelihood import (
    fisher_information,
    loglik_gop,
    loglik_monotone,
    score_gop,
    score_monotone,
    score_rows_gop,
    score_rows_monotone,
    wald,
)
from relrisk.param_map import GopParams, MonotoneParams, monotone_endpoint_probs


def _mono_vec(params, coding, k):
    return lambda x: MonotoneParams(x[:k], x[k:], coding)


def brute_monotone(params, ds):
    """Loglik from the endpoint closed form, one unit at a time."""
    c = params.coding
    total = 0.0
    for i in range(ds.n):
        theta = float(params.gamma @ ds.v_rr[i])
        g = float(params.beta @ ds.v_op[i])
        h = lambda z: theta * (z - c.z0)
        p_inf, p_sup = monotone_endpoint_probs(h(c.z_min), h(c.z_max), g)
        p = p_sup * math.exp(h(ds.z[i]) - h(c.z_max))
        total += math.log(p) if ds.y[i] == 1 else math.log1p(-p)
    return total


def brute_gop(params, ds):
    """Loglik with p0 from plain bisection on the defining equation."""
    total = 0.0
    for i in range(ds.n):
        c = np.exp(params.alphas @ ds.v_rr[i])
        lg = float(params.beta @ ds.v_op[i])
        cc = np.concatenate([[1.0], c])

        def f(p0):
            p = p0 * cc
            return np.sum(np.log(p) - np.log1p(-p)) - lg

        lo, hi = 0.0, 1.0 / cc.max()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            lo, hi = (mid, hi) if f(mid) < 0 else (lo, mid)
        p = 0.5 * (lo + hi) * cc[int(ds.z[i])]
        total += math.log(p) if ds.y[i] == 1 else math.log1p(-p)
    return total


def test_monotone_half():
    coding = TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=1.0)
    params = MonotoneParams([0.0], [0.0], coding)
    for y in (0.0, 1.0):
        ds = Dataset([y], [0.5], [[1.0]], [[1.0]], coding=coding)
        assert loglik_monotone(params, ds) == pytest.approx(math.log(0.5), abs=1e-15)


def test_monotone_additive_and_permutation(rng):
    ds, params = random_monotone(rng, n=30)
    whole = loglik_monotone(params, ds)
    parts = sum(loglik_monotone(params, ds.subset(np.arange(ds.n) == i)) for i in range(ds.n))
    assert whole == pytest.approx(parts, rel=1e-13)
    perm = rng.permutation(ds.n)
    shuffled = Dataset(ds.y[perm], ds.z[perm], ds.v_rr[perm], ds.v_op[perm], coding=ds.coding)
    assert loglik_monotone(params, shuffled) == pytest.approx(whole, rel=1e-13)


def test_monotone_brute_force(rng):
    for _ in range(20):
        z0 = None if rng.random() < 0.5 else 0.0
        ds, params = random_monotone(rng, n=25, p_rr=3)
        if z0 is not None and ds.coding.z_min <= 0 <= ds.coding.z_max:
            params = MonotoneParams(params.gamma, params.beta, ds.coding)
        assert loglik_monotone(params, ds) == pytest.approx(brute_monotone(params, ds), rel=1e-12, abs=1e-12)


def test_monotone_interior_baseline_brute_force(rng):
    for _ in range(10):
        ds, _ = random_monotone(rng, n=20)
        c = ds.coding
        coding = TreatmentCoding("continuous", z0=0.5 * (c.z_min + c.z_max), z_min=c.z_min, z_max=c.z_max)
        ds = Dataset(ds.y, ds.z, ds.v_rr, ds.v_op, coding=coding)
        params = MonotoneParams(rng.normal(0, 1, 2), rng.normal(0, 1, 2), coding)
        assert loglik_monotone(params, ds) == pytest.approx(brute_monotone(params, ds), rel=1e-12)


def test_monotone_score_finite_difference(rng):
    worst = 0.0
    for _ in range(100):
        ds, params = random_monotone(rng, n=30, p_rr=int(rng.integers(1, 4)), p_op=int(rng.integers(1, 4)))
        k = params.gamma.size
        make = _mono_vec(params, ds.coding, k)
        num = central_diff(lambda x: loglik_monotone(make(x), ds), params.vector)
        ana = np.concatenate(score_monotone(params, ds))
        worst = max(worst, rel_err(ana, num).max())
    assert worst <= 1e-6


def test_monotone_score_rows_sum(rng):
    ds, params = random_monotone(rng)
    np.testing.assert_allclose(score_rows_monotone(params, ds).sum(axis=0),
                               np.concatenate(score_monotone(params, ds)), rtol=1e-12)


def test_monotone_score_doubles(rng):
    ds, params = random_monotone(rng)
    twice = Dataset(np.tile(ds.y, 2), np.tile(ds.z, 2), np.vstack([ds.v_rr] * 2),
                    np.vstack([ds.v_op] * 2), coding=ds.coding)
    np.testing.assert_allclose(np.concatenate(score_monotone(params, twice)),
                               2 * np.concatenate(score_monotone(params, ds)), rtol=1e-12)


def test_monotone_score_extreme_parameters():
    # probabilities pinned near 0 and 1 still give finite scores
    coding = TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=1.0)
    ds = Dataset([0, 1, 1, 0.0], [0, 1, 0.5, 1.0], np.ones((4, 1)), np.ones((4, 1)), coding=coding)
    for gamma, beta in ((40.0, 60.0), (-40.0, -60.0), (0.0, 200.0)):
        dg, db = score_monotone(MonotoneParams([gamma], [beta], coding), ds)
        assert np.all(np.isfinite(dg)) and np.all(np.isfinite(db))


def test_gop_zero_params(rng):
    ds, _ = random_gop(rng, n=17, K=3)
    params = GopParams(np.zeros((3, 2)), np.zeros(2))
    assert loglik_gop(params, ds) == pytest.approx(17 * math.log(0.5), rel=1e-14)


def test_gop_brute_force(rng):
    for K in (1, 2, 3):
        for _ in range(5):
            ds, params = random_gop(rng, n=20, K=K)
            assert loglik_gop(params, ds) == pytest.approx(brute_gop(params, ds), rel=1e-12)


def test_gop_k1_equals_binary_monotone(rng):
    for _ in range(10):
        ds, params = random_gop(rng, n=30, K=1)
        coding = TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=1.0)
        binary = Dataset(ds.y, ds.z, ds.v_rr, ds.v_op, coding=coding)
        mono = MonotoneParams(params.alphas[0], params.beta, coding)
        assert loglik_gop(params, ds) == pytest.approx(loglik_monotone(mono, binary), rel=1e-12)


def test_gop_score_finite_difference(rng):
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 4))
        ds, params = random_gop(rng, n=30, K=K, p_rr=int(rng.integers(1, 3)), p_op=int(rng.integers(1, 3)))
        shape = params.alphas.shape
        make = lambda x: GopParams(x[: shape[0] * shape[1]].reshape(shape), x[shape[0] * shape[1]:])
        num = central_diff(lambda x: loglik_gop(make(x), ds), params.vector)
        d_alpha, d_beta = score_gop(params, ds)
        ana = np.concatenate(d_alpha + [d_beta])
        worst = max(worst, rel_err(ana, num).max())
    assert worst <= 1e-6


def test_gop_score_symmetric_levels():
    # levels exchangeable and zero coefficients: identical alpha scores
    K = 3
    z = np.repeat(np.arange(K + 1), 4).astype(float)
    y = np.tile([0, 1, 1, 1], K + 1).astype(float)
    ds = Dataset(y, z, np.ones((z.size, 1)), np.ones((z.size, 1)), coding=TreatmentCoding("categorical", K=K))
    d_alpha, _ = score_gop(GopParams(np.zeros((K, 1)), np.zeros(1)), ds)
    d_alpha = np.vstack(d_alpha)
    np.testing.assert_allclose(d_alpha, np.broadcast_to(d_alpha[0], d_alpha.shape), atol=1e-14)


def test_gop_score_single_baseline_unit():
    v = np.array([1.0, 0.4])
    params = GopParams([[0.3, -0.2], [0.1, 0.5]], [0.2, -0.1])
    ds = Dataset([1.0, 0.0], [0.0, 0.0], [v, v], [v, v], coding=None)
    from relrisk.param_map import gop_probs
    p = gop_probs(params, v, v)
    w = (1 / (1 - p)) / np.sum(1 / (1 - p))
    for i, y in enumerate((1.0, 0.0)):
        unit = ds.subset(np.arange(2) == i)
        d_alpha, _ = score_gop(params, unit)
        for j in (1, 2):
            expected = -w[j] * v * (y - p[0]) / (1 - p[0])
            np.testing.assert_allclose(d_alpha[j - 1], expected, rtol=1e-12)


def test_fisher_examples():
    assert fisher_information(np.array([1.0, -1.0]))[0, 0] == 1.0
    with pytest.raises(SingularInformationError):
        fisher_information(np.ones((1, 2)))
    with pytest.raises(SingularInformationError):
        fisher_information(np.column_stack([np.arange(5.0), 2 * np.arange(5.0)]))


def test_fisher_psd(rng):
    for _ in range(20):
        info = fisher_information(rng.normal(size=(30, 4)))
        assert np.linalg.eigvalsh(info)[0] >= -1e-10
        np.testing.assert_array_equal(info, info.T)


def test_wald_examples():
    res = wald(np.zeros(2), np.eye(2), 100)
    np.testing.assert_allclose(res.se, 0.1, rtol=1e-15)
    assert res.ci_upper[0] == pytest.approx(0.1 * 1.959963984540054, rel=1e-14)
    np.testing.assert_array_equal(res.vcov, res.vcov.T)
    with pytest.raises(SingularInformationError):
        wald([0.0, 0.0], np.zeros((2, 2)), 10)


def test_wald_halves_on_doubled_data(rng):
    ds, params = random_monotone(rng, n=60)
    rows = score_rows_monotone(params, ds)
    one = wald(params.vector, fisher_information(rows), ds.n)
    two = wald(params.vector, fisher_information(np.vstack([rows, rows])), 2 * ds.n)
    np.testing.assert_allclose(two.vcov, one.vcov / 2, rtol=1e-10)
    assert np.max(np.abs(one.vcov - one.vcov.T)) <= 1e-12
