"""Maximum likelihood by blockwise ascent.

The log-likelihoods of both models need not be concave. They are maximized
one parameter block at a time (``gamma`` then ``beta`` for the monotone
model; ``alpha_1, ..., alpha_K, beta`` for the categorical one), each block
by BFGS with an analytic gradient, until a full cycle moves no parameter by
more than ``tol_param``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .baselines import fit_logistic
from .data import Dataset, TreatmentCoding
from .errors import ConvergenceError, DivergenceError, RelRiskError, ValidationError
from .likelihood import (
    fisher_information,
    gop_unit_terms,
    monotone_unit_terms,
    score_rows_gop,
    score_rows_monotone,
    wald,
)
from .param_map import GopParams, MonotoneParams, gop_logprobs, monotone_logprobs
from .results import FitResult

# fitted probabilities closer than exp(-30) to 0 or 1 signal an unbounded likelihood
BOUNDARY_LOG = -30.0
_EPS = np.finfo(float).eps


@dataclass
class FitOptions:
    tol_param: float = 1e-8
    tol_score: float = 1e-6
    inner_tol: float = 1e-8
    max_outer: int = 500
    max_inner: int = 200
    armijo: float = 1e-4
    ascent_slack: float = 1e-10
    starts: int = 1
    joint_polish: bool = True
    start_scale: float = 0.5
    seed: int = 0
    level: float = 0.95

    def tolerances(self):
        return {
            "param": self.tol_param,
            "score": self.tol_score,
            "inner_gradient": self.inner_tol,
            "ascent_slack": self.ascent_slack,
        }


@dataclass
class _BlockRun:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool


def _bfgs_max(fg, x0, opts: FitOptions):
    """Maximize ``fg(x) -> (f, grad, grad_rows)`` by BFGS with Armijo backtracking.

    The inverse-Hessian approximation starts from the inverse outer product of
    per-unit gradients, which is close to the curvature near a maximum.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g, rows = fg(x)
    if not np.isfinite(f):
        raise RelRiskError("log-likelihood is not finite at the starting value")
    H = _bhhh_inverse(rows)
    for it in range(1, opts.max_inner + 1):
        if np.max(np.abs(g)) < opts.inner_tol:
            return _BlockRun(x, f, it - 1, True)
        d = H @ g
        slope = g @ d
        if slope <= 0:
            H = _bhhh_inverse(rows)
            d = H @ g
            slope = g @ d
        t = 1.0
        while True:
            x_new = x + t * d
            f_new, g_new, rows_new = fg(x_new)
            if np.isfinite(f_new) and f_new >= f + opts.armijo * t * slope:
                break
            # near the maximum f is flat to rounding; accept steps that shrink the gradient
            if (np.isfinite(f_new) and f_new >= f - 8 * _EPS * max(1.0, abs(f))
                    and np.max(np.abs(g_new)) < np.max(np.abs(g))):
                break
            t *= 0.5
            if t < 1e-14:
                # no further ascent is representable from here
                return _BlockRun(x, f, it, np.max(np.abs(g)) < 1e3 * opts.inner_tol)
        s = x_new - x
        yv = g - g_new
        sy = s @ yv
        if sy > 1e-16 * np.linalg.norm(s) * np.linalg.norm(yv):
            Hy = H @ yv
            H = H + ((sy + yv @ Hy) / sy**2) * np.outer(s, s) - (np.outer(Hy, s) + np.outer(s, Hy)) / sy
        x, f, g, rows = x_new, f_new, g_new, rows_new
    return _BlockRun(x, f, opts.max_inner, np.max(np.abs(g)) < opts.inner_tol)


def _bhhh_inverse(rows):
    info = rows.T @ rows
    k = info.shape[0]
    scale = max(np.trace(info) / k, 1e-12)
    try:
        return np.linalg.inv(info + 1e-10 * scale * np.eye(k))
    except np.linalg.LinAlgError:
        return np.eye(k) / scale


def _check_boundary(logp, logq):
    if np.min(logp) < BOUNDARY_LOG or np.min(logq) < BOUNDARY_LOG:
        raise DivergenceError(
            "fitted probabilities approach 0 or 1: the likelihood appears unbounded"
        )


# ---------------------------------------------------------------------------
# blockwise driver


def _block_ascent(blocks, x0, loglik, opts: FitOptions, joint_fg=None):
    """Cycle over ``blocks`` (name -> (index slice, block fg factory)).

    ``loglik(x)`` evaluates the full log-likelihood. When ``joint_fg`` is
    given, the first cycle is followed by one quasi-Newton ascent over all
    blocks at once; block cycles alone converge only linearly when blocks
    are strongly coupled. Cycles then continue until no parameter moves.
    Returns the final vector, log-likelihood, outer iteration count,
    convergence flag and trace.
    """
    x = np.asarray(x0, dtype=float).copy()
    ll = loglik(x)
    trace = [ll]

    def accept(name, outer, f_new):
        if f_new < ll - opts.ascent_slack * max(1.0, abs(ll)):
            raise ConvergenceError(
                f"log-likelihood decreased in {name} at cycle {outer}: {ll!r} -> {f_new!r}"
            )
        return f_new

    for outer in range(1, opts.max_outer + 1):
        x_prev = x.copy()
        for name, (idx, make_fg) in blocks.items():
            run = _bfgs_max(make_fg(x), x[idx], opts)
            x[idx] = run.x
            ll = accept(f"block {name}", outer, run.f)
        if joint_fg is not None and outer == 1:
            run = _bfgs_max(joint_fg, x, replace(opts, max_inner=10 * opts.max_inner))
            x = run.x
            ll = accept("joint step", outer, run.f)
        trace.append(ll)
        if np.max(np.abs(x - x_prev)) < opts.tol_param:
            return x, ll, outer, True, trace
    return x, ll, opts.max_outer, False, trace


def _starts(base, opts: FitOptions):
    yield base
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.starts - 1):
        yield base + rng.normal(scale=opts.start_scale, size=base.size)


def _pick_best(candidates):
    """Highest log-likelihood among converged fits, ties by smallest norm."""
    pool = [c for c in candidates if c[3]] or candidates
    best_ll = max(c[1] for c in pool)
    close = [c for c in pool if c[1] >= best_ll - 1e-9 * max(1.0, abs(best_ll))]
    return min(close, key=lambda c: np.linalg.norm(c[0]))


def _logistic_start(ds, scale):
    """``beta`` start: the log odds product when every level has the logistic fit."""
    y_ds = Dataset(ds.y, np.zeros(ds.n), ds.v_op, ds.v_op)
    res = fit_logistic(y_ds, design=ds.v_op)
    return scale * res.estimates


# ---------------------------------------------------------------------------
# monotone model


def _check_outcomes(ds):
    if ds.y.min() == ds.y.max():
        raise DivergenceError(
            f"all outcomes equal {int(ds.y[0])}: fitted probabilities go to the boundary"
        )


def fit_monotone(ds: Dataset, coding: TreatmentCoding | None = None,
                 opts: FitOptions | None = None, start=None) -> FitResult:
    """Fit the monotone relative-risk model with an endpoint odds-product nuisance.

    Parameters
    ----------
    ds : Dataset
        Treatment coded as a bounded continuous variable.
    coding : TreatmentCoding, optional
        Defaults to ``ds.coding``.
    opts : FitOptions, optional
    start : array, optional
        Starting ``(gamma, beta)``; default zeros and twice the logistic fit.
    """
    opts = opts or FitOptions()
    coding = coding or ds.coding
    if coding is None or coding.kind != "continuous":
        raise ValidationError("monotone model needs a continuous treatment coding")
    coding.check_range(ds.z)
    _check_outcomes(ds)
    pr, po = ds.v_rr.shape[1], ds.v_op.shape[1]
    u = coding.effective(ds.z)
    u_lo, u_hi = coding.effective_bounds()
    y, Vr, Vo = ds.y, ds.v_rr, ds.v_op
    ig, ib = slice(0, pr), slice(pr, pr + po)

    def loglik(x):
        ll, _, _ = monotone_unit_terms(Vr @ x[ig], Vo @ x[ib], u, y, u_lo, u_hi)
        return float(np.sum(ll))

    def make_gamma(x):
        g = Vo @ x[ib]

        def fg(gamma):
            ll, dth, _ = monotone_unit_terms(Vr @ gamma, g, u, y, u_lo, u_hi)
            rows = dth[:, None] * Vr
            return float(np.sum(ll)), rows.sum(axis=0), rows
        return fg

    def make_beta(x):
        theta = Vr @ x[ig]

        def fg(beta):
            ll, _, dg = monotone_unit_terms(theta, Vo @ beta, u, y, u_lo, u_hi)
            rows = dg[:, None] * Vo
            return float(np.sum(ll)), rows.sum(axis=0), rows
        return fg

    def joint_fg(x):
        ll, dth, dg = monotone_unit_terms(Vr @ x[ig], Vo @ x[ib], u, y, u_lo, u_hi)
        rows = np.hstack([dth[:, None] * Vr, dg[:, None] * Vo])
        return float(np.sum(ll)), rows.sum(axis=0), rows

    if start is None:
        start = np.concatenate([np.zeros(pr), _logistic_start(ds, 2.0)])
    blocks = {"gamma": (ig, make_gamma), "beta": (ib, make_beta)}
    joint = joint_fg if opts.joint_polish else None
    fits = [_block_ascent(blocks, s0, loglik, opts, joint)
            for s0 in _starts(np.asarray(start, float), opts)]
    x, ll, iters, cycled, trace = _pick_best(fits)

    params = MonotoneParams(x[ig], x[ib], coding)
    lp = monotone_logprobs(Vr @ params.gamma, Vo @ params.beta, u, u_lo, u_hi)
    _check_boundary(lp.logp, lp.logq)
    rows = score_rows_monotone(params, ds)
    score_norm = float(np.max(np.abs(rows.sum(axis=0))))
    inference = wald(x, fisher_information(rows), ds.n, opts.level)
    names = [f"gamma:{t}" for t in ds.rr_names] + [f"beta:{t}" for t in ds.op_names]
    return FitResult(
        model="monotone",
        names=names,
        estimates=x,
        inference=inference,
        loglik=ll,
        iterations=iters,
        converged=bool(cycled and score_norm < opts.tol_score),
        n=ds.n,
        blocks={"gamma": list(range(pr)), "beta": list(range(pr, pr + po))},
        level_map=ds.level_map,
        tolerances=opts.tolerances(),
        design=_design_record(ds, coding),
        derived=_monotone_derived(ds, coding, x[ig], inference.vcov[ig, ig]),
        diagnostics={"score_norm": score_norm, "loglik_trace": trace, "starts": opts.starts},
    )


def _monotone_derived(ds, coding, gamma, vcov_gamma):
    """Per-level log-RR coefficients ``u(z) * gamma`` for discrete treatments."""
    values = np.unique(ds.z)
    values = values[values != coding.z0]
    if values.size == 0 or values.size > 20:
        return None
    names, est, se = [], [], []
    sd = np.sqrt(np.diag(vcov_gamma))
    inv = {v: k for k, v in (ds.level_map or {}).items()}
    for z in values:
        u = float(coding.effective(z))
        label = inv.get(int(z), f"{z:g}") if ds.level_map else f"{z:g}"
        names += [f"{label}:{t}" for t in ds.rr_names]
        est += list(u * gamma)
        se += list(abs(u) * sd)
    return {"names": names, "estimates": est, "se": se}


def _design_record(ds, coding):
    return {
        "coding": coding.to_dict(),
        "rr_names": list(ds.rr_names),
        "op_names": list(ds.op_names),
    }


# ---------------------------------------------------------------------------
# categorical model


def fit_gop(ds: Dataset, K: int | None = None, opts: FitOptions | None = None,
            start=None) -> FitResult:
    """Fit the categorical relative-risk model with a generalized odds-product nuisance.

    ``ds.z`` holds level indices ``0..K`` (level 0 is the baseline). Blocks
    ``alpha_1, ..., alpha_K, beta`` are updated in turn.
    """
    opts = opts or FitOptions()
    coding = ds.coding
    if K is None:
        if coding is None or coding.kind != "categorical":
            raise ValidationError("fit_gop needs a categorical coding or an explicit K")
        K = coding.K
    if coding is None or coding.kind != "categorical" or coding.K != K:
        coding = TreatmentCoding("categorical", K=K)
    z = ds.z.astype(int)
    if np.any((z < 0) | (z > K)) or np.any(z != ds.z):
        raise ValidationError(f"treatment must be a level index in 0..{K}")
    _check_outcomes(ds)
    y, Vr, Vo = ds.y, ds.v_rr, ds.v_op
    pr, po = Vr.shape[1], Vo.shape[1]
    idx_alpha = [slice(k * pr, (k + 1) * pr) for k in range(K)]
    ib = slice(K * pr, K * pr + po)

    def log_rr_of(x):
        return np.column_stack([Vr @ x[s] for s in idx_alpha])

    def loglik(x):
        ll, _, _ = gop_unit_terms(log_rr_of(x), Vo @ x[ib], z, y)
        return float(np.sum(ll))

    def make_alpha(j):
        def make(x):
            lrr = log_rr_of(x)
            lg = Vo @ x[ib]

            def fg(a):
                lrr[:, j] = Vr @ a
                ll, d_rr, _ = gop_unit_terms(lrr, lg, z, y)
                rows = d_rr[:, [j]] * Vr
                return float(np.sum(ll)), rows.sum(axis=0), rows
            return fg
        return make

    def make_beta(x):
        lrr = log_rr_of(x)

        def fg(beta):
            ll, _, d_g = gop_unit_terms(lrr, Vo @ beta, z, y)
            rows = d_g[:, None] * Vo
            return float(np.sum(ll)), rows.sum(axis=0), rows
        return fg

    def joint_fg(x):
        ll, d_rr, d_g = gop_unit_terms(log_rr_of(x), Vo @ x[ib], z, y)
        rows = np.hstack([d_rr[:, [k]] * Vr for k in range(K)] + [d_g[:, None] * Vo])
        return float(np.sum(ll)), rows.sum(axis=0), rows

    if start is None:
        start = np.concatenate([np.zeros(K * pr), _logistic_start(ds, K + 1.0)])
    blocks = {f"alpha{k + 1}": (idx_alpha[k], make_alpha(k)) for k in range(K)}
    blocks["beta"] = (ib, make_beta)
    joint = joint_fg if opts.joint_polish else None
    fits = [_block_ascent(blocks, s0, loglik, opts, joint)
            for s0 in _starts(np.asarray(start, float), opts)]
    x, ll, iters, cycled, trace = _pick_best(fits)

    params = GopParams(np.vstack([x[s] for s in idx_alpha]), x[ib])
    logp, logq = gop_logprobs(log_rr_of(x), Vo @ x[ib])
    rows_i = np.arange(ds.n)
    _check_boundary(logp[rows_i, z], logq[rows_i, z])
    gop_ds = ds if ds.coding is coding else ds.subset(np.ones(ds.n, bool), coding=coding)
    rows = score_rows_gop(params, gop_ds)
    score_norm = float(np.max(np.abs(rows.sum(axis=0))))
    inference = wald(x, fisher_information(rows), ds.n, opts.level)
    names = [f"alpha{k + 1}:{t}" for k in range(K) for t in ds.rr_names]
    names += [f"beta:{t}" for t in ds.op_names]
    blocks_out = {f"alpha{k + 1}": list(range(k * pr, (k + 1) * pr)) for k in range(K)}
    blocks_out["beta"] = list(range(K * pr, K * pr + po))
    return FitResult(
        model="gop",
        names=names,
        estimates=x,
        inference=inference,
        loglik=ll,
        iterations=iters,
        converged=bool(cycled and score_norm < opts.tol_score),
        n=ds.n,
        blocks=blocks_out,
        level_map=ds.level_map,
        tolerances=opts.tolerances(),
        design=_design_record(ds, coding),
        diagnostics={"score_norm": score_norm, "loglik_trace": trace, "starts": opts.starts},
    )


# ---------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    """Fitted probabilities, units x treatment values.

    ``out_of_range`` marks entries outside ``[0, 1]`` (possible only for the
    Poisson working model, whose fitted means are returned unclamped).
    """

    p: np.ndarray
    z: np.ndarray
    out_of_range: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.out_of_range is None:
            self.out_of_range = (self.p < 0) | (self.p > 1)


def predict(fit: FitResult, ds: Dataset, z_grid) -> Prediction:
    """Fitted ``pr(Y = 1 | Z = z, V)`` for every unit of ``ds`` and every ``z`` in the grid.

    For categorical models ``z_grid`` holds treatment labels from
    ``fit.level_map`` (or level indices when the fit has no labels); for the
    monotone model it holds raw treatment values inside the coding range.
    """
    z_grid = list(z_grid)
    n = ds.n
    _check_columns(fit, ds)
    if fit.model == "monotone":
        coding = fit.coding
        zs = np.asarray(z_grid, dtype=float)
        coding.check_range(zs)
        params = fit.monotone_params()
        theta, g = ds.v_rr @ params.gamma, ds.v_op @ params.beta
        u_lo, u_hi = coding.effective_bounds()
        P = np.empty((n, zs.size))
        for j, z in enumerate(zs):
            lp = monotone_logprobs(theta, g, np.full(n, coding.effective(z)), u_lo, u_hi)
            P[:, j] = np.exp(lp.logp)
        return Prediction(P, zs)

    coding = fit.coding
    categorical = coding is not None and coding.kind == "categorical"
    zs = _level_indices(fit, z_grid) if categorical else np.asarray(z_grid, dtype=float)
    if fit.model == "gop":
        params = fit.gop_params()
        logp, _ = gop_logprobs(ds.v_rr @ params.alphas.T, ds.v_op @ params.beta)
        return Prediction(np.exp(logp[:, zs.astype(int)]), zs)
    if fit.model in ("logistic", "poisson"):
        P = np.empty((n, zs.size))
        for j, z in enumerate(zs):
            if categorical:
                blocks = [float(z == k) * ds.v_rr for k in range(1, coding.K + 1)]
            else:
                u = z if coding is None else float(coding.effective(z))
                blocks = [u * ds.v_rr]
            eta = np.hstack([ds.v_op] + blocks) @ fit.estimates
            P[:, j] = expit(eta) if fit.model == "logistic" else np.exp(eta)
        return Prediction(P, zs)
    raise ValidationError(f"prediction not available for model {fit.model!r}")


def _level_indices(fit, z_grid):
    """Level indices for grid entries given as labels or indices."""
    lm = fit.level_map or {}
    K = fit.coding.K
    out = []
    for z in z_grid:
        key = str(z)
        if key in lm:
            out.append(lm[key])
            continue
        try:
            k = float(key)
        except ValueError:
            raise ValidationError(f"unknown treatment level {z!r}") from None
        if not lm and k == int(k):
            out.append(int(k))
        else:
            raise ValidationError(f"unknown treatment level {z!r}; levels are {sorted(lm)}")
    if any(not 0 <= k <= K for k in out):
        raise ValidationError(f"treatment level outside 0..{K}")
    return np.asarray(out, dtype=float)


def _check_columns(fit, ds):
    rr = fit.design.get("rr_names")
    op = fit.design.get("op_names")
    diff = []
    if rr is not None and list(ds.rr_names) != list(rr):
        diff.append(f"rr terms: fit {rr} vs data {list(ds.rr_names)}")
    if op is not None and list(ds.op_names) != list(op):
        diff.append(f"op terms: fit {op} vs data {list(ds.op_names)}")
    if diff:
        raise ValidationError("design mismatch: " + "; ".join(diff))


__all__ = ["FitOptions", "fit_monotone", "fit_gop", "predict", "Prediction"]
