"""Comparator estimators.

* logistic and log-link Poisson regression fitted by Newton/IRLS, reported
  with sandwich (HC0) standard errors;
* doubly robust g-estimators of the relative-risk coefficients, built on a
  multinomial-logistic propensity model and a log-linear baseline risk model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit, log_expit, logsumexp, softmax

from .data import Dataset
from .errors import (
    ConvergenceError,
    DivergenceError,
    RelRiskError,
    SingularInformationError,
    ValidationError,
)
from .likelihood import inference_from_vcov
from .results import FitResult

GLM_TOL = 1e-10
GLM_MAX_ITER = 100
SEPARATION_ETA = 18.0  # |eta| beyond this puts fitted p within 1.6e-8 of 0 or 1


def treatment_design(ds: Dataset, z=None):
    """Baseline-model design: ``v_op`` plus treatment-by-``v_rr`` interactions.

    Categorical treatments contribute one block ``1{z = k} v_rr`` per
    non-baseline level; continuous ones a single block ``u(z) v_rr``.
    Returns the matrix and column names.
    """
    z = ds.z if z is None else np.asarray(z, dtype=float)
    coding = ds.coding
    cols = [ds.v_op]
    names = list(ds.op_names)
    if coding is not None and coding.kind == "categorical":
        labels = _level_labels(ds)
        for k in range(1, coding.K + 1):
            cols.append((z == k)[:, None] * ds.v_rr)
            names += [f"{labels[k]}:{t}" for t in ds.rr_names]
    else:
        u = z if coding is None else coding.effective(z)
        cols.append(u[:, None] * ds.v_rr)
        names += [f"z:{t}" for t in ds.rr_names]
    return np.hstack(cols), names


def _level_labels(ds):
    if ds.level_map:
        inv = {v: k for k, v in ds.level_map.items()}
        return [inv[k] for k in range(len(inv))]
    return [str(k) for k in range(ds.coding.K + 1)]


# ---------------------------------------------------------------------------
# GLMs


def _glm_terms(family, eta, y):
    if family == "logistic":
        mu = expit(eta)
        ll = y * log_expit(eta) + (1 - y) * log_expit(-eta)
        return ll, mu, mu * (1 - mu)
    mu = np.exp(eta)
    return y * eta - mu, mu, mu


def _newton_glm(family, X, y, start=None):
    n, p = X.shape
    if start is not None:
        beta = np.asarray(start, dtype=float).copy()
    else:
        beta = np.zeros(p)
        if family == "poisson":
            # intercept-only start; Newton from eta = 0 overshoots
            ybar = y.mean()
            if ybar <= 0:
                raise DivergenceError("all outcomes are 0: log-linear model is unbounded")
            const = np.flatnonzero(np.all(X == 1, axis=0))
            if const.size:
                beta[const[0]] = np.log(ybar)
    eta = X @ beta
    ll, mu, var = _glm_terms(family, eta, y)
    ll = ll.sum()
    for it in range(1, GLM_MAX_ITER + 1):
        grad = X.T @ (y - mu)
        if np.max(np.abs(grad)) < GLM_TOL:
            return beta, it - 1, True
        hess = X.T @ (var[:, None] * X)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise SingularInformationError("singular GLM information; drop collinear terms") from None
        t = 1.0
        while True:
            trial = beta + t * step
            eta_t = X @ trial
            with np.errstate(over="ignore"):
                ll_t, mu_t, var_t = _glm_terms(family, eta_t, y)
            ll_t = ll_t.sum()
            if np.isfinite(ll_t) and ll_t >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-12:
                return beta, it, False
        beta, eta, mu, var, ll = trial, eta_t, mu_t, var_t, ll_t
        if np.max(np.abs(eta)) > 1e3:
            break
    return beta, GLM_MAX_ITER, False


def _glm_fit(family, ds, design, names, level):
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = ds.y
    if X.shape[0] != ds.n:
        raise ValidationError("design rows do not match the dataset")
    if family == "logistic" and (y.min() == y.max()):
        raise DivergenceError("only one outcome class present: logistic fit diverges")
    beta, iterations, converged = _newton_glm(family, X, y)
    eta = X @ beta
    if family == "logistic" and np.max(np.abs(eta)) > SEPARATION_ETA:
        raise DivergenceError("fitted probabilities reach 0 or 1: (quasi-)separation")
    if family == "poisson" and np.min(eta) < -SEPARATION_ETA:
        raise DivergenceError("fitted means reach 0: log-linear fit diverges")
    if not converged and np.max(np.abs(eta)) > 1e3:
        raise DivergenceError(f"{family} fit diverged")
    ll, mu, var = _glm_terms(family, eta, y)
    bread = X.T @ (var[:, None] * X)
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise SingularInformationError("singular GLM information; drop collinear terms") from None
    resid = y - mu
    meat = X.T @ ((resid**2)[:, None] * X)
    robust = bread_inv @ meat @ bread_inv
    robust = 0.5 * (robust + robust.T)
    inference = inference_from_vcov(beta, robust, level, info=bread / ds.n)
    return FitResult(
        model=family,
        names=list(names) if names is not None else [f"b{j}" for j in range(X.shape[1])],
        estimates=beta,
        inference=inference,
        loglik=float(ll.sum()),
        iterations=iterations,
        converged=converged,
        n=ds.n,
        blocks={"coef": list(range(X.shape[1]))},
        level_map=ds.level_map,
        tolerances={"gradient": GLM_TOL},
        design=_design_record(ds),
        diagnostics={
            "model_se": np.sqrt(np.diag(bread_inv)),
            "score_norm": float(np.max(np.abs(X.T @ resid))),
            "fitted_above_one": int(np.sum(mu > 1)),
        },
    )


def _design_record(ds):
    return {
        "coding": None if ds.coding is None else ds.coding.to_dict(),
        "rr_names": list(ds.rr_names),
        "op_names": list(ds.op_names),
    }


def fit_logistic(ds: Dataset, design=None, names=None, level=0.95) -> FitResult:
    """Logistic regression of ``y`` on ``design`` (default :func:`treatment_design`).

    Raises
    ------
    DivergenceError
        Under (quasi-)complete separation.
    """
    if design is None:
        design, names = treatment_design(ds)
    return _glm_fit("logistic", ds, design, names, level)


def fit_poisson_log(ds: Dataset, design=None, names=None, level=0.95) -> FitResult:
    """Log-link Poisson working model for a binary outcome, sandwich SEs.

    Fitted means are not constrained to ``[0, 1]``; the number exceeding one
    is reported in ``diagnostics["fitted_above_one"]``.
    """
    if design is None:
        design, names = treatment_design(ds)
    return _glm_fit("poisson", ds, design, names, level)


# ---------------------------------------------------------------------------
# propensity model


def fit_multinomial(X, z, n_levels, max_iter=100, tol=1e-10):
    """Multinomial logistic regression with level 0 as reference, by Newton.

    Returns coefficients of shape ``(n_levels - 1, p)``.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=int)
    n, p = X.shape
    K = n_levels - 1
    Y = (z[:, None] == np.arange(1, n_levels)[None, :]).astype(float)

    def loglik(theta):
        eta = np.column_stack([np.zeros(n), X @ theta.reshape(K, p).T])
        return float(np.sum(eta[np.arange(n), z] - logsumexp(eta, axis=1)))

    theta = np.zeros(K * p)
    ll = loglik(theta)
    for _ in range(max_iter):
        eta = np.column_stack([np.zeros(n), X @ theta.reshape(K, p).T])
        pi = softmax(eta, axis=1)[:, 1:]
        grad = ((Y - pi).T @ X).ravel()
        if np.max(np.abs(grad)) < tol:
            return theta.reshape(K, p)
        hess = np.empty((K * p, K * p))
        for k in range(K):
            for m in range(K):
                wkm = pi[:, k] * ((k == m) - pi[:, m])
                hess[k * p:(k + 1) * p, m * p:(m + 1) * p] = X.T @ (wkm[:, None] * X)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while loglik(theta + t * step) < ll - 1e-12 * abs(ll):
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError("propensity model line search failed")
        theta = theta + t * step
        ll = loglik(theta)
        if np.max(np.abs(theta)) > 1e3:
            raise DivergenceError("propensity model diverges (separation of treatment levels)")
    raise ConvergenceError("propensity model did not converge")


def propensity(ps_coefs, X):
    """Treatment-level probabilities ``(n, K+1)`` from multinomial coefficients."""
    X = np.asarray(X, dtype=float)
    eta = np.column_stack([np.zeros(X.shape[0]), X @ np.atleast_2d(ps_coefs).T])
    return softmax(eta, axis=1)


# ---------------------------------------------------------------------------
# doubly robust g-estimation

P_CAP = 1 - 1e-3  # cap on plug-in probabilities inside the efficiency weights


@dataclass
class DrSpec:
    """Nuisance models for g-estimation.

    ``ps_coefs`` (K x p_ps) parameterize ``pr(Z = k | V)`` against level 0;
    ``baseline_coefs`` give ``E(Y | V, Z = 0) = exp(baseline_coefs'V)``.
    The design matrices default to the dataset's ``v_op``.
    """

    ps_coefs: np.ndarray
    baseline_coefs: np.ndarray
    ps_design: np.ndarray | None = None
    baseline_design: np.ndarray | None = None

    def ps(self, ds):
        X = ds.v_op if self.ps_design is None else self.ps_design
        pi = propensity(self.ps_coefs, X)
        if pi.shape[0] != ds.n:
            raise ValidationError("propensity design rows do not match the dataset")
        return pi

    def p0(self, ds):
        X = ds.v_op if self.baseline_design is None else self.baseline_design
        return np.exp(np.asarray(X) @ self.baseline_coefs)


def treatment_levels(ds: Dataset):
    """Treatment values in nuisance-model order (baseline first) and unit indices."""
    if ds.coding is not None and ds.coding.kind == "categorical":
        return np.arange(ds.coding.K + 1, dtype=float), ds.z.astype(int)
    levels = np.unique(ds.z)
    if levels.size > 20:
        raise ValidationError("g-estimation needs a discrete treatment (at most 20 values)")
    z0 = ds.coding.z0 if ds.coding is not None else levels[0]
    if z0 not in levels:
        raise ValidationError("baseline treatment value never observed")
    levels = np.concatenate([[z0], levels[levels != z0]])
    lookup = {float(v): i for i, v in enumerate(levels)}
    return levels, np.array([lookup[float(v)] for v in ds.z], dtype=int)


def fit_dr_spec(ds: Dataset, ps_design=None, baseline_design=None) -> DrSpec:
    """Fit both nuisance models.

    The propensity model is a multinomial logit over the treatment levels
    (baseline first, see :func:`treatment_levels`); the baseline model is a
    log-linear Poisson regression on the units at the baseline level.
    """
    Xps = ds.v_op if ps_design is None else np.asarray(ps_design, dtype=float)
    Xb = ds.v_op if baseline_design is None else np.asarray(baseline_design, dtype=float)
    levels, idx = treatment_levels(ds)
    ps_coefs = fit_multinomial(Xps, idx, len(levels))
    base = idx == 0
    y0 = ds.y[base]
    if y0.sum() == 0:
        raise DivergenceError("no events at the baseline level")
    xi, _, ok = _newton_glm("poisson", Xb[base], y0)
    if not ok:
        raise ConvergenceError("baseline risk model did not converge")
    return DrSpec(ps_coefs, xi, ps_design, baseline_design)


def _dr_score_rows(theta, V, y, idx, contrast, pi, p0, theta_w=None):
    """Per-unit estimating functions for a g-estimator.

    ``contrast`` is (L, J): the treatment covariate of each parameter block at
    each level (``u(z)`` for the monotone model, ``1{z = j}`` for the
    categorical one). ``theta`` stacks J coefficient vectors of length p.
    The efficiency weights use ``theta_w`` (default ``theta``); any fixed
    weights keep the estimating function unbiased when either nuisance model
    is correct.
    """
    n, p = V.shape
    J = contrast.shape[1]
    lrr = (V @ theta.reshape(J, p).T) @ contrast.T  # (n, L): log rr at every level
    if theta_w is None:
        lrr_w = lrr
    else:
        lrr_w = (V @ np.asarray(theta_w).reshape(J, p).T) @ contrast.T
    p_lvl = np.minimum(p0[:, None] * np.exp(np.minimum(lrr_w, 700.0)), P_CAP)
    w = p_lvl / (p0[:, None] * (1 - p_lvl))  # p_Z / (p_0 q_Z)
    ew = np.sum(pi * w, axis=1)
    centre = (pi * w) @ contrast / ew[:, None]  # E{c(Z) w(Z) | V} / E{w(Z) | V}
    rows = np.arange(n)
    resid = y * np.exp(np.minimum(-lrr[rows, idx], 700.0)) - p0
    h = w[rows, idx][:, None] * (contrast[idx] - centre)  # (n, J)
    return ((resid[:, None] * h)[:, :, None] * V[:, None, :]).reshape(n, J * p)


def _loglinear_start(ds, V, idx, contrast):
    """Treatment coefficients of a log-linear Poisson fit, the preliminary estimate."""
    C = contrast[idx]
    X = np.hstack([ds.v_op] + [C[:, [j]] * V for j in range(C.shape[1])])
    try:
        b, _, ok = _newton_glm("poisson", X, ds.y)
    except RelRiskError:
        ok = False
    k = C.shape[1] * V.shape[1]
    return b[ds.v_op.shape[1]:] if ok else np.zeros(k)


def _solve_dr(rows_fn, start, n, model, names, ds, blocks, level):
    """Solve the mean estimating equation; weights are fixed at ``start``."""
    dim = start.size

    def mean_score(theta):
        return rows_fn(theta, start).mean(axis=0)

    sol = optimize.root(mean_score, start, method="hybr", options={"xtol": 1e-12})
    resid = float(np.max(np.abs(mean_score(sol.x))))
    if not (np.all(np.isfinite(sol.x)) and resid <= 1e-8):
        sol = optimize.root(mean_score, start, method="lm", options={"xtol": 1e-12})
        resid = float(np.max(np.abs(mean_score(sol.x))))
    if not np.all(np.isfinite(sol.x)) or not resid <= 1e-8:
        raise ConvergenceError(f"{model} estimating equation not solved (residual {resid:.3g})")
    theta = sol.x
    # sandwich: A^{-1} B A^{-T} / n with A the Jacobian of the mean score
    A = np.empty((dim, dim))
    for j in range(dim):
        step = 1e-6 * max(1.0, abs(theta[j]))
        e = np.zeros(dim)
        e[j] = step
        A[:, j] = (mean_score(theta + e) - mean_score(theta - e)) / (2 * step)
    S = rows_fn(theta, start)
    B = S.T @ S / n
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularInformationError(f"{model}: singular estimating-equation Jacobian") from None
    vcov = A_inv @ B @ A_inv.T / n
    vcov = 0.5 * (vcov + vcov.T)
    return FitResult(
        model=model,
        names=names,
        estimates=theta,
        inference=inference_from_vcov(theta, vcov, level),
        loglik=float("nan"),
        iterations=int(sol.nfev),
        converged=True,
        n=n,
        blocks=blocks,
        level_map=ds.level_map,
        tolerances={"residual": 1e-8},
        design=_design_record(ds),
        diagnostics={"residual": resid, "weights_at": [float(x) for x in start]},
    )


def dr_monotone(ds: Dataset, spec: DrSpec | None = None, level=0.95) -> FitResult:
    """Doubly robust g-estimate of ``gamma`` in ``log rr(z0, z) = gamma'v u(z)``.

    The treatment must be discrete: conditional expectations given ``V`` are
    finite sums over the observed treatment values weighted by the
    propensity model. The efficiency weights are evaluated at a preliminary
    log-linear Poisson estimate, which is also the solver's starting point.
    """
    if ds.coding is None or ds.coding.kind != "continuous":
        raise ValidationError("dr_monotone needs a continuous (ordered) treatment coding")
    levels, idx = treatment_levels(ds)
    if spec is None:
        spec = fit_dr_spec(ds)
    contrast = ds.coding.effective(levels)[:, None]
    pi, p0 = spec.ps(ds), spec.p0(ds)
    V = ds.v_rr
    p = V.shape[1]
    names = [f"gamma:{t}" for t in ds.rr_names]
    start = _loglinear_start(ds, V, idx, contrast)
    return _solve_dr(
        lambda th, tw: _dr_score_rows(th, V, ds.y, idx, contrast, pi, p0, tw),
        start, ds.n, "dr-mono", names, ds, {"gamma": list(range(p))}, level,
    )


def dr_categorical(ds: Dataset, spec: DrSpec | None = None, level=0.95) -> FitResult:
    """Doubly robust g-estimates of ``alpha_1..alpha_K`` for a categorical treatment."""
    if ds.coding is None or ds.coding.kind != "categorical":
        raise ValidationError("dr_categorical needs a categorical treatment coding")
    K = ds.coding.K
    _, idx = treatment_levels(ds)
    if spec is None:
        spec = fit_dr_spec(ds)
    contrast = np.vstack([np.zeros(K), np.eye(K)])
    pi, p0 = spec.ps(ds), spec.p0(ds)
    V = ds.v_rr
    p = V.shape[1]
    names = [f"alpha{k}:{t}" for k in range(1, K + 1) for t in ds.rr_names]
    blocks = {f"alpha{k}": list(range((k - 1) * p, k * p)) for k in range(1, K + 1)}
    start = _loglinear_start(ds, V, idx, contrast)
    return _solve_dr(
        lambda th, tw: _dr_score_rows(th, V, ds.y, idx, contrast, pi, p0, tw),
        start, ds.n, "dr-cat", names, ds, blocks, level,
    )


def dr_weight_centering(ds: Dataset, theta, spec: DrSpec, contrast):
    """Per-unit ``E{w(Z) (c(Z) - centre) | V}`` under the propensity model (should be 0)."""
    V = ds.v_rr
    n, p = V.shape
    J = contrast.shape[1]
    pi, p0 = spec.ps(ds), spec.p0(ds)
    lrr = (V @ np.asarray(theta).reshape(J, p).T) @ contrast.T
    p_lvl = np.minimum(p0[:, None] * np.exp(lrr), P_CAP)
    w = p_lvl / (p0[:, None] * (1 - p_lvl))
    centre = (pi * w) @ contrast / np.sum(pi * w, axis=1)[:, None]
    return np.einsum("nl,nlj->nj", pi * w, contrast[None, :, :] - centre[:, None, :])
