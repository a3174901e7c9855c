"""Random data and parameter draws shared by the test modules."""
import numpy as np

from relrisk.data import Dataset, TreatmentCoding
from relrisk.param_map import GopParams, MonotoneParams


def random_monotone(rng, n=40, p_rr=2, p_op=2, z0=None):
    z_min, z_max = sorted(rng.uniform(-2, 2, 2))
    z_max += 0.5
    z0 = z_min if z0 is None else z0
    coding = TreatmentCoding("continuous", z0=z0, z_min=z_min, z_max=z_max)
    v_rr = np.column_stack([np.ones(n), rng.normal(size=(n, p_rr - 1))])
    v_op = np.column_stack([np.ones(n), rng.normal(size=(n, p_op - 1))])
    z = rng.uniform(z_min, z_max, n)
    z[:2] = z_min, z_max
    y = rng.integers(0, 2, n).astype(float)
    ds = Dataset(y, z, v_rr, v_op, coding=coding)
    params = MonotoneParams(rng.normal(0, 0.7, p_rr), rng.normal(0, 1, p_op), coding)
    return ds, params


def random_gop(rng, n=40, K=2, p_rr=2, p_op=2):
    v_rr = np.column_stack([np.ones(n), rng.normal(size=(n, p_rr - 1))])
    v_op = np.column_stack([np.ones(n), rng.normal(size=(n, p_op - 1))])
    z = rng.integers(0, K + 1, n)
    z[: K + 1] = np.arange(K + 1)
    y = rng.integers(0, 2, n).astype(float)
    ds = Dataset(y, z.astype(float), v_rr, v_op, coding=TreatmentCoding("categorical", K=K))
    params = GopParams(rng.normal(0, 0.7, (K, p_rr)), rng.normal(0, 1, p_op))
    return ds, params


def central_diff(f, x, rel_step=1e-6):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(up) - f(dn)) / (2 * h)
    return out


def rel_err(a, b):
    """Componentwise ``|a - b| / max(1, |a|)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(1.0, np.abs(a))


# acceptance bookkeeping: checks recorded per criterion, summarized by conftest
ACCEPTANCE = {}


def record(criterion, label, ok, detail=""):
    ACCEPTANCE.setdefault(criterion, []).append((label, bool(ok), detail))
    print(f"[criterion {criterion}] {'PASS' if ok else 'FAIL'} {label} {detail}".rstrip())
    return bool(ok)
