"""Fit results and their JSON form."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import TreatmentCoding
from .likelihood import InferenceResult
from .param_map import GopParams, MonotoneParams

MODELS = ("monotone", "gop", "logistic", "poisson", "dr-mono", "dr-cat")


@dataclass
class FitResult:
    """Estimates, inference and convergence record of one fitted model.

    ``blocks`` maps a parameter block (``"gamma"``, ``"beta"``,
    ``"alpha1"``, ...) to positions in ``estimates``. ``design`` records what
    is needed to rebuild design matrices for prediction: term lists, treatment
    column and coding.
    """

    model: str
    names: list[str]
    estimates: np.ndarray
    inference: InferenceResult
    loglik: float
    iterations: int
    converged: bool
    n: int
    blocks: dict[str, list[int]] = field(default_factory=dict)
    level_map: dict[str, int] | None = None
    tolerances: dict[str, float] = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    derived: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self):
        return self.inference.se

    def block(self, name):
        return self.estimates[self.blocks[name]]

    def block_se(self, name):
        return self.inference.se[self.blocks[name]]

    def coef(self, name):
        return float(self.estimates[self.names.index(name)])

    @property
    def coding(self) -> TreatmentCoding | None:
        c = self.design.get("coding")
        return None if c is None else TreatmentCoding.from_dict(c)

    def monotone_params(self) -> MonotoneParams:
        return MonotoneParams(self.block("gamma"), self.block("beta"), self.coding)

    def gop_params(self) -> GopParams:
        K = sum(1 for b in self.blocks if b.startswith("alpha"))
        alphas = np.vstack([self.block(f"alpha{k}") for k in range(1, K + 1)])
        return GopParams(alphas, self.block("beta"))

    def to_dict(self):
        inf = self.inference
        return {
            "model": self.model,
            "n": self.n,
            "names": list(self.names),
            "estimates": _floats(self.estimates),
            "se": _floats(inf.se),
            "ci_lower": _floats(inf.ci_lower),
            "ci_upper": _floats(inf.ci_upper),
            "level": inf.level,
            "vcov": _floats(inf.vcov.ravel()),
            "loglik": _float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "blocks": self.blocks,
            "level_map": self.level_map,
            "tolerances": self.tolerances,
            "design": self.design,
            "derived": self.derived,
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        est = np.array(_unfloats(d["estimates"]))
        k = est.size
        vcov = np.array(_unfloats(d["vcov"])).reshape(k, k)
        inference = InferenceResult(
            vcov=vcov,
            se=np.array(_unfloats(d["se"])),
            ci_lower=np.array(_unfloats(d["ci_lower"])),
            ci_upper=np.array(_unfloats(d["ci_upper"])),
            info=np.full((k, k), np.nan),
            level=d.get("level", 0.95),
        )
        return cls(
            model=d["model"],
            names=list(d["names"]),
            estimates=est,
            inference=inference,
            loglik=_unfloat(d["loglik"]),
            iterations=d["iterations"],
            converged=d["converged"],
            n=d["n"],
            blocks={k: list(v) for k, v in d["blocks"].items()},
            level_map=d.get("level_map"),
            tolerances=d.get("tolerances", {}),
            design=d.get("design", {}),
            derived=d.get("derived"),
            diagnostics=d.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# JSON has no NaN/inf; they travel as strings.
def _float(x):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _unfloat(x):
    return float(x)


def _floats(a):
    return [_float(x) for x in np.asarray(a, dtype=float).ravel()]


def _unfloats(a):
    return [float(x) for x in a]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return _float(obj)
    return obj
