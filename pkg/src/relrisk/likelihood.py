"""Log-likelihoods, analytic scores and Wald inference for both models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import SingularInformationError, ValidationError
from .param_map import GopParams, MonotoneParams, gop_logprobs, monotone_logprobs


def _bernoulli_terms(y, logp, logq):
    """Per-unit log-likelihood and d l / d log p = (y - p) / (1 - p)."""
    ll = np.where(y == 1, logp, logq)
    # capped so that p/(1-p) stays finite when 1-p underflows
    dlogp = np.where(y == 1, 1.0, -np.exp(np.minimum(logp - logq, 700.0)))
    return ll, dlogp


# ---------------------------------------------------------------------------
# monotone model


def monotone_unit_terms(theta, g, u, y, u_lo, u_hi):
    """Per-unit log-likelihood and its derivatives in ``theta`` and ``g``.

    With ``psi = log p`` at the baseline, implicit differentiation of the
    endpoint odds-product constraint gives

        d psi / d g     = q_lo q_hi / (q_lo + q_hi)
        d psi / d theta = -(u_lo q_hi + u_hi q_lo) / (q_lo + q_hi)

    where ``q`` is one minus the endpoint probability.
    """
    lp = monotone_logprobs(theta, g, u, u_lo, u_hi)
    ll, dlogp = _bernoulli_terms(y, lp.logp, lp.logq)
    q_lo, q_hi = np.exp(lp.logq_lo), np.exp(lp.logq_hi)
    s = q_lo + q_hi
    dtheta = dlogp * (u - (u_lo * q_hi + u_hi * q_lo) / s)
    dg = dlogp * (q_lo * q_hi / s)
    return ll, dtheta, dg


def _monotone_parts(params: MonotoneParams, ds: Dataset):
    if ds.coding is None or ds.coding.kind != "continuous":
        raise ValidationError("monotone model needs a continuous treatment coding")
    u_lo, u_hi = params.coding.effective_bounds()
    theta = ds.v_rr @ params.gamma
    g = ds.v_op @ params.beta
    return monotone_unit_terms(theta, g, params.coding.effective(ds.z), ds.y, u_lo, u_hi)


def loglik_monotone(params: MonotoneParams, ds: Dataset) -> float:
    """Sum over units of ``y log p_z(v) + (1 - y) log(1 - p_z(v))``."""
    ll, _, _ = _monotone_parts(params, ds)
    return float(np.sum(ll))


def score_rows_monotone(params: MonotoneParams, ds: Dataset) -> np.ndarray:
    """Per-unit scores, columns ordered ``(gamma, beta)``."""
    _, dtheta, dg = _monotone_parts(params, ds)
    return np.hstack([dtheta[:, None] * ds.v_rr, dg[:, None] * ds.v_op])


def score_monotone(params: MonotoneParams, ds: Dataset):
    """Gradient of :func:`loglik_monotone` as ``(d gamma, d beta)``."""
    _, dtheta, dg = _monotone_parts(params, ds)
    return ds.v_rr.T @ dtheta, ds.v_op.T @ dg


# ---------------------------------------------------------------------------
# categorical model


def gop_unit_terms(log_rr, log_gop, z, y):
    """Per-unit log-likelihood and derivatives in ``log_rr`` (n x K) and ``log_gop``.

    For a unit observed at level ``k``, with weights
    ``w_j = (1/q_j) / sum_l (1/q_l)``:

        d l / d log_rr_j  = (y - p_k)/q_k * (1{k = j} - w_j)
        d l / d log_gop   = (y - p_k)/q_k / sum_l (1/q_l)
    """
    logp, logq = gop_logprobs(log_rr, log_gop)
    idx = np.asarray(z, dtype=int)
    rows = np.arange(idx.size)
    ll, dlogp = _bernoulli_terms(y, logp[rows, idx], logq[rows, idx])
    inv_q = np.exp(-logq)
    total = inv_q.sum(axis=1)
    w = inv_q[:, 1:] / total[:, None]
    onehot = idx[:, None] == np.arange(1, logp.shape[1])[None, :]
    d_rr = dlogp[:, None] * (onehot - w)
    d_gop = dlogp / total
    return ll, d_rr, d_gop


def _gop_parts(params: GopParams, ds: Dataset):
    if ds.coding is not None and ds.coding.kind == "categorical" and ds.coding.K != params.K:
        raise ValidationError(f"parameters have K={params.K}, data has K={ds.coding.K}")
    log_rr = ds.v_rr @ params.alphas.T
    log_gop = ds.v_op @ params.beta
    return gop_unit_terms(log_rr, log_gop, ds.z, ds.y)


def loglik_gop(params: GopParams, ds: Dataset) -> float:
    ll, _, _ = _gop_parts(params, ds)
    return float(np.sum(ll))


def score_rows_gop(params: GopParams, ds: Dataset) -> np.ndarray:
    """Per-unit scores, columns ordered ``(alpha_1, ..., alpha_K, beta)``."""
    _, d_rr, d_gop = _gop_parts(params, ds)
    blocks = [d_rr[:, [k]] * ds.v_rr for k in range(params.K)]
    return np.hstack(blocks + [d_gop[:, None] * ds.v_op])


def score_gop(params: GopParams, ds: Dataset):
    """Gradient of :func:`loglik_gop`: ``([d alpha_1, ..., d alpha_K], d beta)``."""
    _, d_rr, d_gop = _gop_parts(params, ds)
    return [ds.v_rr.T @ d_rr[:, k] for k in range(params.K)], ds.v_op.T @ d_gop


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    vcov: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    info: np.ndarray
    level: float = 0.95


def fisher_information(score_rows) -> np.ndarray:
    """Average outer product of per-unit scores.

    Raises
    ------
    SingularInformationError
        If there are fewer units than parameters or the matrix is singular.
    """
    s = np.asarray(score_rows, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n, k = s.shape
    if n < k:
        raise SingularInformationError(f"{n} units cannot identify {k} parameters")
    info = s.T @ s / n
    info = 0.5 * (info + info.T)
    _check_invertible(info)
    return info


def _check_invertible(info):
    eig = np.linalg.eigvalsh(info)
    if not np.all(np.isfinite(eig)) or eig[0] <= eig[-1] * 1e-13:
        raise SingularInformationError(
            "information matrix is singular; drop collinear or unidentified terms"
        )


def wald(estimates, info, n, level=0.95) -> InferenceResult:
    """Wald inference with ``vcov = (n * info)^{-1}``."""
    est = np.asarray(estimates, dtype=float)
    info = np.atleast_2d(np.asarray(info, dtype=float))
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    _check_invertible(info)
    vcov = np.linalg.inv(n * info)
    vcov = 0.5 * (vcov + vcov.T)
    return inference_from_vcov(est, vcov, level, info)


def inference_from_vcov(est, vcov, level=0.95, info=None) -> InferenceResult:
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    zq = stats.norm.ppf(0.5 + level / 2)
    return InferenceResult(
        vcov=vcov,
        se=se,
        ci_lower=est - zq * se,
        ci_upper=est + zq * se,
        info=info if info is not None else np.full_like(vcov, np.nan),
        level=level,
    )
