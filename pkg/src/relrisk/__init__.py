"""Relative-risk regression for binary outcomes with variation-independent nuisance models."""
from .data import Dataset, Schema, TreatmentCoding, load_csv, write_csv
from .errors import (
    ConvergenceError,
    DivergenceError,
    ParseError,
    RelRiskError,
    SchemaError,
    SingularInformationError,
    ValidationError,
)
from .fit import FitOptions, Prediction, fit_gop, fit_monotone, predict
from .param_map import GopParams, MonotoneParams
from .results import FitResult

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "Dataset",
    "DivergenceError",
    "FitOptions",
    "FitResult",
    "GopParams",
    "MonotoneParams",
    "ParseError",
    "Prediction",
    "RelRiskError",
    "Schema",
    "SchemaError",
    "SingularInformationError",
    "TreatmentCoding",
    "ValidationError",
    "fit_gop",
    "fit_monotone",
    "load_csv",
    "predict",
    "write_csv",
]
