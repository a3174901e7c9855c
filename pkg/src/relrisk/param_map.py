"""Maps between (log relative risk, log odds product) coordinates and probabilities.

Two parameterizations are covered:

* monotone treatment effect: ``log rr(z0, z; v) = h(z, v)`` monotone in ``z``
  and ``log op(z_min, z_max; v) = g(v)``;
* categorical treatment with levels ``0..K``: ``log rr(0, k; v)`` for
  ``k = 1..K`` and the log generalized odds product
  ``sum_k logit p_k(v)``.

Both maps are smooth bijections onto the open unit cube, so any real
coefficient vector yields valid probabilities. Everything is computed on the
log scale, returning ``log p`` and ``log(1 - p)`` so that probabilities
indistinguishable from 1 in double precision still have a usable complement.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import TreatmentCoding
from .errors import ConvergenceError, ValidationError

LOG2 = np.log(2.0)
LOG4 = np.log(4.0)


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite input")


def _log1mexp(x):
    """log(1 - exp(x)) for x <= 0; -inf at x == 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > -LOG2, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


# ---------------------------------------------------------------------------
# binary pair: the workhorse behind the monotone map


class PairLogProbs(NamedTuple):
    logp_big: np.ndarray
    logq_big: np.ndarray
    logp_small: np.ndarray
    logq_small: np.ndarray


def _pair_logprobs(e, g):
    """Solve p_small = exp(e) * p_big, logit p_big + logit p_small = g, for e <= 0.

    With r = exp(e) the larger probability is
    ``2 / ((1 + r) + sqrt((1 - r)**2 + 4 r exp(-g)))``, the cancellation-free
    form of the smaller quadratic root. It needs no special case at g = 0.
    """
    r = np.exp(e)
    log1mr = _log1mexp(e)
    with np.errstate(divide="ignore"):
        log_s = 0.5 * np.logaddexp(2.0 * log1mr, LOG4 + e - g)
    log_den = np.logaddexp(np.log1p(r), log_s)  # log(1 + r + s)
    logp_big = LOG2 - log_den
    # 1 - p_big = 4 r exp(-g) / ((s + 1 - r)(1 + r + s))
    logq_big = LOG4 + e - g - np.logaddexp(log_s, log1mr) - log_den
    logp_small = logp_big + e
    # 1 - r p = (1 - r) + r (1 - p)
    with np.errstate(divide="ignore"):
        logq_small = np.logaddexp(log1mr, e + logq_big)
    return PairLogProbs(logp_big, logq_big, logp_small, logq_small)


def log_monotone_delta(h1, h2, g):
    """log of :func:`monotone_delta`, finite whenever the inputs are."""
    h1, h2, g = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h1, h2, g)))
    _finite(h1, h2, g)
    d = h1 - h2
    e = -np.abs(d)
    # (1 - r)^2 + 4 r exp(-g) with r = exp(d), factoring out max(r, 1)^2
    with np.errstate(divide="ignore"):
        inner = 2.0 * np.maximum(d, 0.0) + np.logaddexp(2.0 * _log1mexp(e), LOG4 + e - g)
    out = 2.0 * g + inner
    return out if out.ndim else float(out)


def monotone_delta(h1, h2, g):
    """Discriminant ``e^{2g}(e^{h1-h2}+1)^2 + 4 e^{h1-h2+g}(1-e^g)`` (always > 0).

    Evaluated as ``exp(2g) ((1 - r)^2 + 4 r exp(-g))`` with ``r = exp(h1 - h2)``
    in log space, so no intermediate overflows; the result itself overflows to
    ``inf`` once it exceeds the double range (use :func:`log_monotone_delta`).
    """
    with np.errstate(over="ignore"):
        return np.exp(log_monotone_delta(h1, h2, g))


def monotone_endpoint_logprobs(h1, h2, g):
    """Log probabilities at the two treatment endpoints.

    Returns ``(logp_inf, logq_inf, logp_sup, logq_sup)`` where ``q = 1 - p``,
    ``h1``/``h2`` are the log relative risks at the lower/upper endpoint and
    ``g`` the log odds product between them.
    """
    h1, h2, g = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h1, h2, g)))
    _finite(h1, h2, g)
    d = h1 - h2  # p_inf = p_sup * exp(d)
    pair = _pair_logprobs(-np.abs(d), g)
    sup_big = d <= 0
    logp_sup = np.where(sup_big, pair.logp_big, pair.logp_small)
    logq_sup = np.where(sup_big, pair.logq_big, pair.logq_small)
    logp_inf = np.where(sup_big, pair.logp_small, pair.logp_big)
    logq_inf = np.where(sup_big, pair.logq_small, pair.logq_big)
    return logp_inf, logq_inf, logp_sup, logq_sup


def monotone_endpoint_probs(h1, h2, g):
    """Endpoint probabilities ``(p_inf, p_sup)`` with ``p_inf = p_sup e^{h1 - h2}``.

    Examples
    --------
    >>> p_inf, p_sup = monotone_endpoint_probs(0.0, np.log(2.0), 0.0)
    >>> round(float(p_inf), 12), round(float(p_sup), 12)
    (0.333333333333, 0.666666666667)
    """
    logp_inf, _, logp_sup, _ = monotone_endpoint_logprobs(h1, h2, g)
    p_inf, p_sup = np.exp(logp_inf), np.exp(logp_sup)
    if p_inf.ndim == 0:
        return float(p_inf), float(p_sup)
    return p_inf, p_sup


@dataclass(frozen=True)
class MonotoneParams:
    """Coefficients of the monotone model.

    ``gamma`` multiplies ``v_rr`` in ``log rr(z0, z) = gamma'v_rr * u(z)`` where
    ``u`` is the coded treatment (``z - z0`` by default); ``beta`` multiplies
    ``v_op`` in the log odds product between the treatment endpoints.
    """

    gamma: np.ndarray
    beta: np.ndarray
    coding: TreatmentCoding

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).ravel()
        beta = np.asarray(self.beta, dtype=float).ravel()
        _finite(gamma, beta)
        if self.coding.kind != "continuous":
            raise ValidationError("monotone model needs a continuous treatment coding")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @property
    def vector(self):
        return np.concatenate([self.gamma, self.beta])


class MonotoneLogProbs(NamedTuple):
    logp: np.ndarray  # at the observed treatment
    logq: np.ndarray
    logq_lo: np.ndarray  # 1 - p at the lower / upper treatment endpoint
    logq_hi: np.ndarray


def monotone_logprobs(theta, g, u, u_lo, u_hi):
    """Log probabilities under the monotone model from linear predictors.

    ``theta = gamma'v_rr``, ``g = beta'v_op``, ``u`` the coded treatment with
    range ``[u_lo, u_hi]`` (``u = 0`` at the baseline).
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    u = np.asarray(u, dtype=float)
    h1, h2 = theta * u_lo, theta * u_hi
    logp_lo, logq_lo, logp_hi, logq_hi = monotone_endpoint_logprobs(h1, h2, g)
    # measure from whichever endpoint has the larger probability so the offset is <= 0
    hi_big = theta >= 0
    logp_ref = np.where(hi_big, logp_hi, logp_lo)
    logq_ref = np.where(hi_big, logq_hi, logq_lo)
    t = np.minimum(theta * u - np.where(hi_big, h2, h1), 0.0)
    logp = logp_ref + t
    with np.errstate(divide="ignore"):
        logq = np.logaddexp(_log1mexp(t), t + logq_ref)
    return MonotoneLogProbs(logp, logq, logq_lo, logq_hi)


def monotone_prob_at(params: MonotoneParams, v_rr, v_op, z) -> float:
    """``p_z(v)`` for one covariate pattern under the monotone model."""
    coding = params.coding
    coding.check_range(np.atleast_1d(z))
    theta = float(np.dot(params.gamma, v_rr))
    g = float(np.dot(params.beta, v_op))
    u_lo, u_hi = coding.effective_bounds()
    u = float(coding.effective(z))
    lp = monotone_logprobs(theta, g, u, u_lo, u_hi)
    return float(np.exp(lp.logp))


# ---------------------------------------------------------------------------
# categorical treatment, generalized odds product

ROOT_TOL = 1e-12
ROOT_MAX_ITER = 200
BISECT_WIDTH = 1e-3


def _gop_eval(t, e, log1me, full=True):
    """Sum of logits and its derivative in ``t = logit(p_max)``.

    ``e`` holds ``log rr_k - max_l log rr_l <= 0`` for each level (n x (K+1))
    and ``log1me`` is ``log(1 - exp(e))``.
    """
    logp_max = -np.logaddexp(0.0, -t)
    logq_max = -np.logaddexp(0.0, t)
    logp = logp_max[:, None] + e
    logq = np.logaddexp(log1me, e + logq_max[:, None])
    total = np.sum(logp - logq, axis=1)
    if not full:
        return total
    deriv = np.sum(np.exp(logq_max[:, None] - logq), axis=1)
    return total, deriv, logp, logq


def gop_logprobs(log_rr, log_gop, tol=ROOT_TOL, max_iter=ROOT_MAX_ITER):
    """Log probabilities for every treatment level from natural parameters.

    Parameters
    ----------
    log_rr : array (n, K)
        Log relative risks of levels 1..K against level 0.
    log_gop : array (n,)
        Log generalized odds product.

    Returns
    -------
    logp, logq : arrays (n, K+1)
        ``log p_k`` and ``log(1 - p_k)`` for levels ``0..K``.

    Notes
    -----
    The unknown is ``t = logit`` of the largest level probability. The sum of
    logits minus ``log_gop``, ``F(t)``, is strictly increasing with slope in
    ``[1, K+1]``, so the root lies between ``-F(0)`` and ``-F(0)/(K+1)``.
    Bisection narrows that bracket to ``BISECT_WIDTH`` and safeguarded Newton
    finishes.
    """
    log_rr = np.atleast_2d(np.asarray(log_rr, dtype=float))
    log_gop = np.atleast_1d(np.asarray(log_gop, dtype=float))
    _finite(log_rr, log_gop)
    n, K = log_rr.shape
    d = np.column_stack([np.zeros(n), log_rr])
    e = d - d.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        log1me = _log1mexp(e)

    f0 = _gop_eval(np.zeros(n), e, log1me, full=False) - log_gop
    a, b = -f0, -f0 / (K + 1)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    width = hi - lo
    n_bisect = int(np.ceil(np.log2(max(width.max(), BISECT_WIDTH) / BISECT_WIDTH)))
    for _ in range(min(n_bisect, max_iter)):
        mid = 0.5 * (lo + hi)
        up = _gop_eval(mid, e, log1me, full=False) < log_gop
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)

    t = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f, fp, logp, logq = _gop_eval(t, e, log1me)
        f = f - log_gop
        if np.all(np.abs(f) < tol):
            break
        lo = np.where(f < 0, t, lo)
        hi = np.where(f > 0, t, hi)
        t_new = t - f / fp
        outside = (t_new < lo) | (t_new > hi)
        t_new = np.where(outside, 0.5 * (lo + hi), t_new)
        stalled = t_new == t
        if np.all(stalled | (np.abs(f) < tol)):
            break
        t = t_new
    else:
        f, fp, logp, logq = _gop_eval(t, e, log1me)
        f = f - log_gop
    # attainable accuracy is limited by rounding in the sum of K+1 logits
    slack = 64 * np.finfo(float).eps * (np.abs(log_gop) + np.sum(np.abs(logp - logq), axis=1))
    if not np.all(np.abs(f) <= np.maximum(tol, slack)):
        worst = float(np.max(np.abs(f)))
        raise ConvergenceError(f"odds-product root solver did not converge (|f| = {worst:.3g})")
    return logp, logq


def gop_solve_p0(rr, gop) -> float:
    """Baseline probability ``p_0`` given relative risks ``c_k`` and the odds product.

    Solves ``(K+1) log p0 + sum log c_k - log(1-p0) - sum log(1 - p0 c_k) = log gop``,
    whose unique root lies in ``(0, min(1, 1/max c_k))``.

    Examples
    --------
    >>> round(gop_solve_p0([2.0], 1.0), 12)
    0.333333333333
    """
    rr = np.atleast_1d(np.asarray(rr, dtype=float))
    if rr.ndim != 1 or rr.size < 1:
        raise ValidationError("need at least one relative risk")
    if np.any(~(rr > 0)) or not gop > 0:
        raise ValidationError("relative risks and odds product must be positive")
    _finite(rr, gop)
    logp, _ = gop_logprobs(np.log(rr)[None, :], np.array([np.log(gop)]))
    return float(np.exp(logp[0, 0]))


@dataclass(frozen=True)
class GopParams:
    """Coefficients of the categorical-treatment model.

    ``alphas`` is ``(K, p_x)``: row ``k-1`` gives ``log rr(0, k) = alpha_k'x``.
    ``beta`` gives the log generalized odds product ``beta'w``.
    """

    alphas: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        beta = np.asarray(self.beta, dtype=float).ravel()
        if alphas.shape[0] < 1:
            raise ValidationError("need K >= 1")
        _finite(alphas, beta)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "beta", beta)

    @property
    def K(self):
        return self.alphas.shape[0]

    @property
    def vector(self):
        return np.concatenate([self.alphas.ravel(), self.beta])


def gop_probs(params: GopParams, x, w) -> np.ndarray:
    """Probabilities ``(p_0, ..., p_K)`` for one covariate pattern."""
    log_rr = params.alphas @ np.asarray(x, dtype=float)
    log_gop = float(np.dot(params.beta, w))
    logp, _ = gop_logprobs(log_rr[None, :], np.array([log_gop]))
    return np.exp(logp[0])


def probs_to_natural(p) -> tuple[np.ndarray, float]:
    """Inverse map: ``(log p_k/p_0 for k=1..K, sum_k logit p_k)``."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValidationError("need probabilities for at least two levels")
    if np.any(~((p > 0) & (p < 1))):
        raise ValidationError("probabilities must lie strictly inside (0, 1)")
    logp = np.log(p)
    return logp[1:] - logp[0], float(np.sum(logp - np.log1p(-p)))


def logprobs_to_natural(logp, logq) -> tuple[np.ndarray, np.ndarray]:
    """Inverse map on the log scale, rowwise over ``(n, K+1)`` arrays.

    Takes ``log p_k`` and ``log(1 - p_k)`` as returned by :func:`gop_logprobs`.
    Probabilities within rounding of 1 keep their full accuracy here, which
    :func:`probs_to_natural` cannot offer.
    """
    logp = np.atleast_2d(np.asarray(logp, dtype=float))
    logq = np.atleast_2d(np.asarray(logq, dtype=float))
    if logp.shape != logq.shape or logp.shape[1] < 2:
        raise ValidationError("need matching (n, K+1) arrays with K >= 1")
    if not (np.all(np.isfinite(logp)) and np.all(np.isfinite(logq))):
        raise ValidationError("probabilities must lie strictly inside (0, 1)")
    return logp[:, 1:] - logp[:, :1], np.sum(logp - logq, axis=1)
