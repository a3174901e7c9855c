"""Monte Carlo studies of the relative-risk estimators.

Each replicate draws ``V = (1, U)`` with ``U ~ Uniform[-2, 2]``, a
three-level treatment from a multinomial logit, and a binary outcome from
either the monotone model (treatment used as the number 0, 1, 2) or the
categorical model. Replicates use their own counter-based random streams,
so a report depends only on the configuration and never on scheduling.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .baselines import dr_categorical, dr_monotone, propensity
from .data import Dataset, TreatmentCoding
from .errors import RelRiskError, ValidationError
from .fit import FitOptions, fit_gop, fit_monotone
from .param_map import gop_logprobs, monotone_logprobs

SETTINGS = ("monotone", "gop", "op-twice")

# estimator -> settings it applies to
ESTIMATORS = {
    "monotone": ("monotone",),
    "dr-mono": ("monotone",),
    "gop": ("gop", "op-twice"),
    "dr-cat": ("gop", "op-twice"),
    "op-twice": ("gop", "op-twice"),
    "dr-twice": ("gop", "op-twice"),
}

DEFAULTS = {
    "monotone": {
        "truth": {"gamma": [0.0, 1.0], "beta": [1.0, -0.5]},
        "estimators": ["monotone", "dr-mono"],
    },
    "gop": {
        "truth": {"alpha1": [0.0, 1.0], "alpha2": [0.0, 2.0], "beta": [1.0, -0.5]},
        "estimators": ["gop"],
    },
    "op-twice": {
        "truth": {"alpha1": [-0.5, 1.0], "alpha2": [0.5, 1.5], "beta": [1.0, -0.5]},
        "estimators": ["gop", "op-twice", "dr-twice"],
    },
}

STREAM_COVARIATE, STREAM_TREATMENT, STREAM_OUTCOME = 0, 1, 2
FAILURE_LIMIT = 0.05
COVARIATE_NAMES = ("1", "u")


@dataclass
class SimConfig:
    setting: str
    n: int
    reps: int
    seed: int = 1
    eta1: tuple = (1.0, -1.0)
    eta2: tuple = (1.0, -2.0)
    truth: dict | None = None
    estimators: tuple | None = None
    level: float = 0.95
    threads: int = 1

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValidationError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.reps < 1:
            raise ValidationError("reps must be at least 1")
        if self.n < 10:
            raise ValidationError("n must be at least 10")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        d = DEFAULTS[self.setting]
        truth = self.truth or d["truth"]
        self.truth = {k: [float(x) for x in v] for k, v in truth.items()}
        self.estimators = tuple(self.estimators or d["estimators"])
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValidationError(f"unknown estimator {e!r}")
            if self.setting not in ESTIMATORS[e]:
                raise ValidationError(f"estimator {e!r} does not apply to setting {self.setting!r}")
        self.eta1 = tuple(float(x) for x in self.eta1)
        self.eta2 = tuple(float(x) for x in self.eta2)

    @property
    def categorical(self):
        return self.setting != "monotone"

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        d["eta1"], d["eta2"] = list(self.eta1), list(self.eta2)
        del d["threads"]  # results never depend on it
        return d


def replicate_rng(seed, rep_index, stream):
    """Philox generator keyed by ``(seed, rep_index, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep_index, stream])))


def treatment_probs(cfg: SimConfig, V):
    return propensity(np.array([cfg.eta1, cfg.eta2]), V)


def _draw_treatment(rng, pi):
    # inverse-cdf draw from one uniform per unit
    u = rng.random(pi.shape[0])
    return np.minimum((u[:, None] > np.cumsum(pi, axis=1)).sum(axis=1), pi.shape[1] - 1)


def true_probs(cfg: SimConfig, V, z):
    """``pr(Y = 1 | Z = z, V)`` under the configured truth."""
    t = cfg.truth
    if cfg.categorical:
        log_rr = np.column_stack([V @ np.asarray(t["alpha1"]), V @ np.asarray(t["alpha2"])])
        logp, _ = gop_logprobs(log_rr, V @ np.asarray(t["beta"]))
        return np.exp(logp[np.arange(len(z)), z])
    lp = monotone_logprobs(V @ np.asarray(t["gamma"]), V @ np.asarray(t["beta"]), z.astype(float), 0.0, 2.0)
    return np.exp(lp.logp)


def monotone_coding():
    return TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=2.0)


def gen_replicate(cfg: SimConfig, rep_index: int) -> Dataset:
    """Data set number ``rep_index``; identical for identical ``(cfg, rep_index)``."""
    n = cfg.n
    u = replicate_rng(cfg.seed, rep_index, STREAM_COVARIATE).uniform(-2.0, 2.0, n)
    V = np.column_stack([np.ones(n), u])
    z = _draw_treatment(replicate_rng(cfg.seed, rep_index, STREAM_TREATMENT), treatment_probs(cfg, V))
    p = true_probs(cfg, V, z)
    y = (replicate_rng(cfg.seed, rep_index, STREAM_OUTCOME).random(n) < p).astype(float)
    if cfg.categorical:
        coding = TreatmentCoding("categorical", K=2)
        level_map = {"0": 0, "1": 1, "2": 2}
    else:
        coding, level_map = monotone_coding(), None
    return Dataset(y, z.astype(float), V, V, coding=coding, rr_names=COVARIATE_NAMES,
                   op_names=COVARIATE_NAMES, level_map=level_map, columns={"u": u})


def binary_subset(ds: Dataset, level: int, coding: TreatmentCoding) -> Dataset:
    """Units at level 0 or ``level`` in their original order, treatment relabeled to 0/1."""
    mask = (ds.z == 0) | (ds.z == level)
    return ds.subset(mask, coding=coding, z=(ds.z[mask] == level).astype(float))


# ---------------------------------------------------------------------------
# estimators


def target_names(cfg: SimConfig):
    if cfg.categorical:
        return [f"alpha{k}:{c}" for k in (1, 2) for c in COVARIATE_NAMES]
    return [f"gamma:{c}" for c in COVARIATE_NAMES]


def target_truth(cfg: SimConfig):
    keys = ("alpha1", "alpha2") if cfg.categorical else ("gamma",)
    return np.concatenate([cfg.truth[k] for k in keys])


def _estimate(name, ds, cfg: SimConfig, opts: FitOptions):
    """(estimates, se, converged) for the target coefficients."""
    if name == "monotone":
        r = fit_monotone(ds, opts=opts)
        return r.block("gamma"), r.block_se("gamma"), r.converged
    if name == "gop":
        r = fit_gop(ds, opts=opts)
        idx = r.blocks["alpha1"] + r.blocks["alpha2"]
        return r.estimates[idx], r.se[idx], r.converged
    if name == "dr-mono":
        r = dr_monotone(ds, level=cfg.level)
        return r.estimates, r.se, r.converged
    if name == "dr-cat":
        r = dr_categorical(ds, level=cfg.level)
        return r.estimates, r.se, r.converged
    if name == "op-twice":
        # the binary odds-product model, once per non-baseline level
        coding = TreatmentCoding("continuous", z0=0.0, z_min=0.0, z_max=1.0)
        fits = [fit_monotone(binary_subset(ds, k, coding), opts=opts) for k in (1, 2)]
        return (np.concatenate([f.block("gamma") for f in fits]),
                np.concatenate([f.block_se("gamma") for f in fits]),
                all(f.converged for f in fits))
    if name == "dr-twice":
        coding = TreatmentCoding("categorical", K=1)
        fits = [dr_categorical(binary_subset(ds, k, coding), level=cfg.level) for k in (1, 2)]
        return (np.concatenate([f.estimates for f in fits]),
                np.concatenate([f.se for f in fits]), True)
    raise ValidationError(f"unknown estimator {name!r}")


def run_replicate(cfg: SimConfig, rep_index: int):
    """Per-estimator ``(estimates, se, status)`` for one replicate."""
    opts = FitOptions(level=cfg.level)
    k = len(target_names(cfg))
    try:
        ds = gen_replicate(cfg, rep_index)
    except RelRiskError as exc:
        # e.g. a treatment level never drawn in a tiny sample
        return {e: (np.full(k, np.nan), np.full(k, np.nan), f"data: {exc}") for e in cfg.estimators}
    out = {}
    for e in cfg.estimators:
        try:
            est, se, ok = _estimate(e, ds, cfg, opts)
            status = "ok" if ok else "not converged"
        except RelRiskError as exc:
            est, se, status = np.full(k, np.nan), np.full(k, np.nan), type(exc).__name__
        if status == "ok" and not (np.all(np.isfinite(est)) and np.all(np.isfinite(se))):
            status = "non-finite"
        out[e] = (np.asarray(est, float), np.asarray(se, float), status)
    return out


def _run_chunk(args):
    cfg, reps = args
    return [run_replicate(cfg, r) for r in reps]


def _collect(cfg: SimConfig):
    reps = list(range(cfg.reps))
    if cfg.threads == 1:
        return _run_chunk((cfg, reps))
    # contiguous chunks keep results in replicate order
    size = math.ceil(len(reps) / (4 * cfg.threads))
    chunks = [reps[i:i + size] for i in range(0, len(reps), size)]
    with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
        parts = pool.map(_run_chunk, [(cfg, c) for c in chunks])
        return [r for part in parts for r in part]


# ---------------------------------------------------------------------------
# report


@dataclass
class SimReport:
    """Per-estimator, per-coefficient summaries over replicates.

    ``rows`` hold ``bias``, ``bias_se`` (Monte Carlo SE of the bias),
    ``sd_accuracy`` (mean model SE over the Monte Carlo SD) and
    ``coverage`` of the Wald intervals, computed over the replicates where
    the estimator succeeded. ``raw`` keeps every replicate estimate.
    """

    config: dict
    rows: list[dict]
    raw: list[dict]
    failures: dict[str, int]
    unreliable: dict[str, bool]
    notes: list[str] = field(default_factory=list)

    CSV_COLUMNS = ("estimator", "coef", "truth", "bias", "bias_se", "sd_accuracy",
                   "coverage", "n", "reps", "failures")
    RAW_COLUMNS = ("rep", "estimator", "coef", "estimate", "se", "status")

    def row(self, estimator, coef):
        for r in self.rows:
            if r["estimator"] == estimator and r["coef"] == coef:
                return r
        raise KeyError((estimator, coef))

    def to_csv(self):
        return _csv(self.CSV_COLUMNS, self.rows)

    def raw_csv(self):
        return _csv(self.RAW_COLUMNS, self.raw)

    def to_json(self):
        doc = {
            "config": self.config,
            "rows": [{k: _json_float(v) for k, v in r.items()} for r in self.rows],
            "failures": self.failures,
            "unreliable": self.unreliable,
            "notes": self.notes,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def summarize(cfg: SimConfig, results) -> SimReport:
    names = target_names(cfg)
    truth = target_truth(cfg)
    zq = stats.norm.ppf(0.5 + cfg.level / 2)
    rows, raw, failures, unreliable, notes = [], [], {}, {}, []
    for e in cfg.estimators:
        est = np.array([r[e][0] for r in results])
        se = np.array([r[e][1] for r in results])
        status = [r[e][2] for r in results]
        ok = np.array([s == "ok" for s in status])
        failures[e] = int((~ok).sum())
        unreliable[e] = failures[e] > FAILURE_LIMIT * cfg.reps
        if unreliable[e]:
            notes.append(f"{e}: {failures[e]} of {cfg.reps} replicates failed; summaries unreliable")
        m = int(ok.sum())
        for j, name in enumerate(names):
            x, s = est[ok, j], se[ok, j]
            bias = float(x.mean() - truth[j]) if m else math.nan
            sd = float(x.std(ddof=1)) if m > 1 else math.nan
            acc = float(s.mean() / sd) if m > 1 and sd > 0 else math.nan
            cover = float(np.mean(np.abs(x - truth[j]) <= zq * s)) if m else math.nan
            rows.append({
                "estimator": e, "coef": name, "truth": float(truth[j]), "bias": bias,
                "bias_se": sd / math.sqrt(m) if m > 1 else math.nan,
                "sd_accuracy": acc, "coverage": cover, "n": cfg.n, "reps": cfg.reps,
                "failures": failures[e],
            })
        if m < 2:
            notes.append(f"{e}: fewer than two successful replicates; sd_accuracy undefined")
        for i, r in enumerate(results):
            for j, name in enumerate(names):
                raw.append({"rep": i, "estimator": e, "coef": name, "estimate": float(r[e][0][j]),
                            "se": float(r[e][1][j]), "status": r[e][2]})
    return SimReport(cfg.to_dict(), rows, raw, failures, unreliable, notes)


def run_mc(cfg: SimConfig) -> SimReport:
    """Fit every configured estimator on ``cfg.reps`` replicates and summarize."""
    return summarize(cfg, _collect(cfg))


def misspecified_op_twice(cfg: SimConfig) -> SimReport:
    """Binary odds-product fits on the ``Z in {0,1}`` and ``Z in {0,2}`` subsets, beside GOP.

    The two binary nuisance models are incompatible with the categorical
    truth, so their relative-risk estimates stay biased as ``n`` grows.
    """
    if cfg.setting != "op-twice":
        raise ValidationError("misspecified_op_twice needs the 'op-twice' setting")
    if "op-twice" not in cfg.estimators:
        raise ValidationError("estimators must include 'op-twice'")
    return run_mc(cfg)
