"""CSV ingestion, design matrices and treatment coding."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

_MISSING = {"", "na", "nan", "null", "none"}

# Bounded maps f with f(0) = 0, applied to (z - z0).
_TRANSFORMS = {
    "tanh": (np.tanh, -1.0, 1.0),
    "arctan": (np.arctan, -math.pi / 2, math.pi / 2),
}


@dataclass(frozen=True)
class TreatmentCoding:
    """How raw treatment values enter the relative-risk model.

    ``kind`` is ``"continuous"`` (bounded, ordered treatment entering the
    monotone model through ``z - z0``) or ``"categorical"`` (levels
    ``0..K`` with the baseline recoded to 0).
    """

    kind: str
    z0: float = 0.0
    z_min: float | None = None
    z_max: float | None = None
    K: int | None = None
    transform: str | None = None
    rescale: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValidationError(f"unknown treatment kind {self.kind!r}")
        if self.kind == "categorical":
            if self.K is None or self.K < 1:
                raise ValidationError("categorical coding needs K >= 1")
            if self.z0 != 0:
                raise ValidationError("categorical baseline must be level 0")
            return
        if self.transform is not None and self.transform not in _TRANSFORMS:
            raise ValidationError(f"unknown treatment transform {self.transform!r}")
        if self.transform is None:
            if self.z_min is None or self.z_max is None:
                raise ValidationError("bounded treatment needs z_min and z_max")
        lo = -math.inf if self.z_min is None else self.z_min
        hi = math.inf if self.z_max is None else self.z_max
        if not lo < hi:
            raise ValidationError(f"need z_min < z_max, got {lo} and {hi}")
        if not lo <= self.z0 <= hi:
            raise ValidationError(f"baseline {self.z0} outside [{lo}, {hi}]")
        if self.rescale and self.transform is not None:
            raise ValidationError("rescale applies to untransformed treatments only")

    def effective(self, z):
        """Treatment on the scale entering the linear predictor, zero at ``z0``."""
        z = np.asarray(z, dtype=float)
        if self.transform is not None:
            f = _TRANSFORMS[self.transform][0]
            return f(z - self.z0)
        if self.rescale:
            return (z - self.z0) / (self.z_max - self.z_min)
        return z - self.z0

    def effective_bounds(self):
        """(lower, upper) limits of :meth:`effective` over the treatment range."""
        if self.transform is not None:
            f, lo, hi = _TRANSFORMS[self.transform]
            if self.z_min is not None:
                lo = float(f(self.z_min - self.z0))
            if self.z_max is not None:
                hi = float(f(self.z_max - self.z0))
            return lo, hi
        lo, hi = self.effective(np.array([self.z_min, self.z_max]))
        return float(lo), float(hi)

    def check_range(self, z):
        z = np.asarray(z, dtype=float)
        lo = -math.inf if self.z_min is None else self.z_min
        hi = math.inf if self.z_max is None else self.z_max
        bad = (z < lo) | (z > hi) | ~np.isfinite(z)
        if np.any(bad):
            raise ValidationError(
                f"treatment value {z[bad][0]} outside coding range [{lo}, {hi}]"
            )

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("kind", "z0", "z_min", "z_max", "K", "transform", "rescale")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# design terms

_FACTOR = re.compile(r"^(?P<col>[^*^/]+?)(?:\^(?P<pow>[0-9]+))?(?:/(?P<scale>[0-9.eE+-]+))?$")


@dataclass(frozen=True)
class Term:
    """One design column: a product of (column ** power / scale) factors."""

    name: str
    factors: tuple[tuple[str, int, float], ...] = ()

    @property
    def is_intercept(self):
        return not self.factors

    @property
    def columns(self):
        return tuple(col for col, _, _ in self.factors)

    def evaluate(self, raw: Mapping[str, np.ndarray], n: int):
        out = np.ones(n)
        for col, power, scale in self.factors:
            out = out * np.asarray(raw[col], dtype=float) ** power / scale
        return out


def parse_term(token: str) -> Term:
    """Parse ``1``, ``col``, ``col/k``, ``col^2/k`` or products joined by ``*``."""
    token = token.strip()
    if token == "1":
        return Term("1")
    factors = []
    for part in token.split("*"):
        m = _FACTOR.match(part.strip())
        if m is None or not m.group("col").strip():
            raise SchemaError(f"cannot parse term {token!r}")
        power = int(m.group("pow") or 1)
        try:
            scale = float(m.group("scale") or 1.0)
        except ValueError:
            raise SchemaError(f"bad scale in term {token!r}") from None
        if scale == 0 or not math.isfinite(scale):
            raise SchemaError(f"bad scale in term {token!r}")
        factors.append((m.group("col").strip(), power, scale))
    return Term(token, tuple(factors))


def parse_terms(spec: str | Sequence[str]) -> list[Term]:
    tokens = spec.split(",") if isinstance(spec, str) else list(spec)
    terms = [t if isinstance(t, Term) else parse_term(t) for t in tokens if str(t).strip()]
    if not terms:
        raise SchemaError("empty term list")
    return terms


def build_design(raw: Mapping[str, np.ndarray], terms) -> np.ndarray:
    """Design matrix with one column per term; the intercept, if any, comes first.

    Parameters
    ----------
    raw : mapping of column name to numeric array
    terms : term tokens (see :func:`parse_term`) or a comma separated string

    Raises
    ------
    SchemaError
        If a term names a column missing from ``raw`` or a term is repeated.
    """
    terms = order_terms(parse_terms(terms))
    if not raw:
        raise SchemaError("no columns available")
    n = len(next(iter(raw.values())))
    for term in terms:
        for col in term.columns:
            if col not in raw:
                raise SchemaError(f"unknown column {col!r} in term {term.name!r}")
    return np.column_stack([t.evaluate(raw, n) for t in terms]) if terms else np.empty((n, 0))


def order_terms(terms: list[Term]) -> list[Term]:
    seen = set()
    for t in terms:
        key = tuple(sorted(t.factors))
        if key in seen:
            raise SchemaError(f"duplicate term {t.name!r}")
        seen.add(key)
    return [t for t in terms if t.is_intercept] + [t for t in terms if not t.is_intercept]


def term_names(terms) -> tuple[str, ...]:
    return tuple(t.name for t in order_terms(parse_terms(terms)))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Schema:
    """Column mapping used by :func:`load_csv`."""

    outcome: str
    treatment: str
    rr_terms: tuple[str, ...] = ("1",)
    op_terms: tuple[str, ...] = ("1",)
    kind: str = "categorical"
    baseline: str | None = None
    z_min: float | None = None
    z_max: float | None = None
    transform: str | None = None
    rescale: bool = False

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["rr_terms"] = list(self.rr_terms)
        d["op_terms"] = list(self.op_terms)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["rr_terms"] = tuple(d["rr_terms"])
        d["op_terms"] = tuple(d["op_terms"])
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    """Outcome, treatment and covariate designs for ``n`` units.

    ``v_rr`` enters the relative-risk model and ``v_op`` the nuisance
    (odds-product) model. For categorical treatments ``z`` holds level
    indices and ``level_map`` maps the original labels to them.
    """

    y: np.ndarray
    z: np.ndarray
    v_rr: np.ndarray
    v_op: np.ndarray
    coding: TreatmentCoding | None = None
    rr_names: tuple[str, ...] = ()
    op_names: tuple[str, ...] = ()
    level_map: dict[str, int] | None = None
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z, dtype=float)
        v_rr = np.atleast_2d(np.asarray(self.v_rr, dtype=float))
        v_op = np.atleast_2d(np.asarray(self.v_op, dtype=float))
        n = y.shape[0]
        if n == 0:
            raise ValidationError("empty dataset")
        if z.shape != (n,) or v_rr.shape[0] != n or v_op.shape[0] != n:
            raise ValidationError("y, z, v_rr and v_op must have the same number of rows")
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise ValidationError(f"outcome must be 0/1 (row {bad[0] + 1} is {y[bad[0]]})")
        for name, arr in (("z", z), ("v_rr", v_rr), ("v_op", v_op)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite entries in {name}")
        c = self.coding
        if c is not None and c.kind == "categorical":
            levels = np.arange(c.K + 1)
            if not np.all(np.isin(z, levels)):
                raise ValidationError(f"categorical treatment must take values in 0..{c.K}")
            missing = [k for k in levels if not np.any(z == k)]
            if missing:
                raise ValidationError(f"treatment level(s) {missing} never observed")
        for arr in (y, z, v_rr, v_op):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "v_rr", v_rr)
        object.__setattr__(self, "v_op", v_op)
        if not self.rr_names:
            object.__setattr__(self, "rr_names", tuple(f"x{j}" for j in range(v_rr.shape[1])))
        if not self.op_names:
            object.__setattr__(self, "op_names", tuple(f"w{j}" for j in range(v_op.shape[1])))

    @property
    def n(self):
        return self.y.shape[0]

    def subset(self, mask, coding=None, z=None):
        """Rows selected by ``mask`` in their original order."""
        mask = np.asarray(mask)
        return Dataset(
            y=self.y[mask],
            z=self.z[mask] if z is None else z,
            v_rr=self.v_rr[mask],
            v_op=self.v_op[mask],
            coding=self.coding if coding is None else coding,
            rr_names=self.rr_names,
            op_names=self.op_names,
            level_map=None if coding is not None else self.level_map,
            columns={k: v[mask] for k, v in self.columns.items()},
        )


def read_table(path) -> tuple[list[str], list[dict[str, str]]]:
    """Header and rows of a comma separated UTF-8 file."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: header row required")
        header = [h.strip() for h in reader.fieldnames]
        rows = [{k.strip(): (v or "").strip() for k, v in r.items() if k is not None}
                for r in reader]
    return header, rows


def _numeric_column(rows, col, required):
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        cell = row.get(col, "")
        if cell.lower() in _MISSING:
            if required:
                raise ParseError(f"missing value in column {col!r}", row=i + 1)
            return None
        try:
            out[i] = float(cell)
        except ValueError:
            if required:
                raise ParseError(f"non-numeric value {cell!r} in column {col!r}", row=i + 1) from None
            return None
    return out


def numeric_columns(header, rows, required=()):
    """Parse every numeric column; ``required`` columns must parse fully."""
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    cols = {}
    for col in header:
        arr = _numeric_column(rows, col, col in required)
        if arr is not None:
            cols[col] = arr
    return cols


def _level_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def categorical_levels(labels, baseline=None) -> dict[str, int]:
    """Map labels to 0..K with ``baseline`` at 0 and the rest in sorted order."""
    levels = sorted(set(labels), key=_level_key)
    if baseline is None:
        baseline = levels[0]
    baseline = str(baseline)
    if baseline not in levels:
        # tolerate "1" vs "1.0"
        key = _level_key(baseline)
        match = [lv for lv in levels if key[0] == 0 and _level_key(lv)[:2] == key[:2]]
        if not match:
            raise ValidationError(f"baseline level {baseline!r} not present in treatment")
        baseline = match[0]
    ordered = [baseline] + [lv for lv in levels if lv != baseline]
    return {lv: i for i, lv in enumerate(ordered)}


def load_csv(path, schema: Schema) -> Dataset:
    """Read a CSV file into a :class:`Dataset` according to ``schema``.

    Rows keep file order. Missing values in any used column are rejected.
    """
    header, rows = read_table(path)
    rr_terms = order_terms(parse_terms(schema.rr_terms))
    op_terms = order_terms(parse_terms(schema.op_terms))
    used = [schema.outcome]
    for t in rr_terms + op_terms:
        used.extend(c for c in t.columns if c not in used)
    missing = [c for c in used + [schema.treatment] if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    if not rows:
        raise ValidationError("empty dataset")
    cols = numeric_columns(header, rows, required=used)
    labels = [r[schema.treatment] for r in rows]
    for i, lab in enumerate(labels):
        if lab.lower() in _MISSING:
            raise ParseError(f"missing treatment in column {schema.treatment!r}", row=i + 1)
    y = cols[schema.outcome]
    bad = np.flatnonzero((y != 0) & (y != 1))
    if bad.size:
        raise ValidationError(
            f"row {bad[0] + 1}: outcome {schema.outcome!r} must be 0 or 1, got {y[bad[0]]:g}"
        )

    level_map = None
    if schema.kind == "categorical":
        level_map = categorical_levels(labels, schema.baseline)
        z = np.array([level_map[lab] for lab in labels], dtype=float)
        coding = TreatmentCoding("categorical", K=len(level_map) - 1)
    elif schema.kind == "continuous":
        z = _numeric_column(rows, schema.treatment, required=True)
        z0 = float(schema.baseline) if schema.baseline is not None else float(z.min())
        coding = TreatmentCoding(
            "continuous",
            z0=z0,
            z_min=float(z.min()) if schema.z_min is None else schema.z_min,
            z_max=float(z.max()) if schema.z_max is None else schema.z_max,
            transform=schema.transform,
            rescale=schema.rescale,
        )
        coding.check_range(z)
    else:
        raise ValidationError(f"unknown treatment kind {schema.kind!r}")
    cols.setdefault(schema.treatment, z)

    return Dataset(
        y=y,
        z=z,
        v_rr=build_design(cols, rr_terms),
        v_op=build_design(cols, op_terms),
        coding=coding,
        rr_names=tuple(t.name for t in rr_terms),
        op_names=tuple(t.name for t in op_terms),
        level_map=level_map,
        columns=cols,
    )


def load_covariates(path, schema: Schema) -> Dataset:
    """Covariate designs of ``schema`` for prediction on new units.

    Outcome and treatment columns are not needed; the returned dataset
    carries placeholder zeros for both and no treatment coding.
    """
    header, rows = read_table(path)
    rr_terms = order_terms(parse_terms(schema.rr_terms))
    op_terms = order_terms(parse_terms(schema.op_terms))
    used = []
    for t in rr_terms + op_terms:
        used.extend(c for c in t.columns if c not in used)
    missing = [c for c in used if c not in header]
    if missing:
        raise SchemaError(
            f"design mismatch: missing column(s) {', '.join(missing)}; "
            f"data has {', '.join(header)}"
        )
    if not rows:
        raise ValidationError("empty dataset")
    cols = numeric_columns(header, rows, required=used)
    n = len(rows)
    return Dataset(
        y=np.zeros(n),
        z=np.zeros(n),
        v_rr=build_design(cols, rr_terms),
        v_op=build_design(cols, op_terms),
        rr_names=tuple(t.name for t in rr_terms),
        op_names=tuple(t.name for t in op_terms),
        columns=cols,
    )


def write_csv(ds: Dataset, path) -> Schema:
    """Write ``ds`` so that ``load_csv(path, schema)`` rebuilds it exactly.

    Returns the schema to read it back with.
    """
    rr_cols = [f"rr.{j}" for j in range(ds.v_rr.shape[1])]
    op_cols = [f"op.{j}" for j in range(ds.v_op.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "z"] + rr_cols + op_cols)
        for i in range(ds.n):
            writer.writerow(
                [repr(float(ds.y[i])), repr(float(ds.z[i]))]
                + [repr(float(x)) for x in ds.v_rr[i]]
                + [repr(float(x)) for x in ds.v_op[i]]
            )
    c = ds.coding
    if c is None or c.kind == "categorical":
        return Schema("y", "z", tuple(rr_cols), tuple(op_cols), kind="categorical", baseline="0")
    return Schema("y", "z", tuple(rr_cols), tuple(op_cols), kind="continuous",
                  baseline=repr(c.z0), z_min=c.z_min, z_max=c.z_max,
                  transform=c.transform, rescale=c.rescale)


@dataclass(frozen=True)
class GroupRate:
    n: int
    rate: float


def empirical_rates(ds: Dataset, by: Sequence[str], mask=None) -> dict[tuple, GroupRate]:
    """Event rate (mean outcome) and size for each group of ``by`` columns.

    ``"z"`` refers to the coded treatment; other names refer to raw columns.
    """
    if not by:
        raise ValidationError("empty grouping")
    keys = []
    for col in by:
        if col == "z":
            keys.append(ds.z)
        elif col in ds.columns:
            keys.append(ds.columns[col])
        else:
            raise SchemaError(f"unknown grouping column {col!r}")
    sel = np.ones(ds.n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    groups = {}
    stacked = np.column_stack(keys)[sel]
    y = ds.y[sel]
    for key in sorted({tuple(row) for row in stacked.tolist()}):
        m = np.all(stacked == np.array(key), axis=1)
        groups[key] = GroupRate(int(m.sum()), float(y[m].mean()))
    return groups


def bundled_titanic_path() -> Path:
    """Filtered Titanic passenger file (age-complete rows, n = 1046)."""
    return Path(__file__).parent / "datasets" / "titanic.csv"


TITANIC_TERMS = ("1", "male", "age/10", "age^2/100", "male*age/10")


def titanic_schema(kind="categorical") -> Schema:
    """Schema reproducing the Titanic analysis: death by class, baseline first class."""
    return Schema(
        outcome="died",
        treatment="pclass",
        rr_terms=TITANIC_TERMS,
        op_terms=TITANIC_TERMS,
        kind=kind,
        baseline="1",
    )
