"""Command-line interface: ``relrisk fit | simulate | predict``.

Exit codes: 0 success, 1 input or data error, 2 fit did not converge,
64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .baselines import dr_categorical, dr_monotone, fit_logistic, fit_poisson_log
from .data import Schema, bundled_titanic_path, load_covariates, load_csv
from .errors import RelRiskError
from .fit import FitOptions, fit_gop, fit_monotone, predict
from .mc import ESTIMATORS, SETTINGS, SimConfig, misspecified_op_twice, run_mc
from .results import FitResult

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2, 64
MODELS = ("monotone", "gop", "logistic", "poisson", "dr-mono", "dr-cat")
CONTINUOUS_MODELS = ("monotone", "dr-mono")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _terms(spec):
    return tuple(t.strip() for t in spec.split(",") if t.strip())


def _data_path(value):
    # "titanic" names the bundled file
    return bundled_titanic_path() if value == "titanic" else Path(value)


def build_parser():
    p = _Parser(prog="relrisk", description="Relative-risk regression for binary outcomes.")
    p.add_argument("--version", action="version", version=f"relrisk {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model and print the result as JSON")
    f.add_argument("--model", required=True, choices=MODELS)
    f.add_argument("--data", required=True, help="CSV file, or 'titanic' for the bundled data")
    f.add_argument("--outcome", required=True)
    f.add_argument("--treatment", required=True)
    f.add_argument("--baseline-level", required=True)
    f.add_argument("--rr-terms", required=True, help="comma separated terms, e.g. 1,male,age/10")
    f.add_argument("--op-terms", required=True)
    f.add_argument("--z-min", type=float)
    f.add_argument("--z-max", type=float)
    f.add_argument("--transform", choices=("tanh", "arctan"))
    f.add_argument("--rescale", action="store_true", help="divide z - z0 by z_max - z_min")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--starts", type=int, default=1)
    f.add_argument("--out")

    s = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    s.add_argument("--setting", required=True, choices=SETTINGS)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--reps", type=int, required=True)
    s.add_argument("--seed", type=int, help="default 1, or $RELRISK_SEED when set")
    s.add_argument("--estimators", help="comma separated; choose from " + ", ".join(ESTIMATORS))
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", help="report CSV path; JSON and raw estimates are written beside it")

    r = sub.add_parser("predict", help="fitted probabilities over a treatment grid")
    r.add_argument("--fit", required=True, help="FitResult JSON written by 'relrisk fit'")
    r.add_argument("--data", required=True)
    r.add_argument("--grid", required=True, help="comma separated treatment values (may be empty)")
    r.add_argument("--out")
    return p


# ---------------------------------------------------------------------------
# manifest


def _digest_bytes(b):
    return "sha256:" + hashlib.sha256(b).hexdigest()


def _digest_file(path):
    return _digest_bytes(Path(path).read_bytes())


def write_manifest(path, argv, config, inputs, outputs, started):
    manifest = {
        "command": ["relrisk", *argv],
        "config_hash": _digest_bytes(json.dumps(config, sort_keys=True).encode()),
        "tool_version": __version__,
        "inputs": {str(p): _digest_file(p) for p in inputs},
        "outputs": {name: _digest_bytes(body.encode()) for name, body in outputs.items()},
        "started": started,
        "finished": _now(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _emit(body, out, argv, config, inputs, started, extra=None):
    """Write ``body`` to ``out`` (or stdout) plus any ``extra`` files and the manifest."""
    outputs = {}
    if out is None:
        sys.stdout.write(body)
        outputs["<stdout>"] = body
    else:
        Path(out).write_text(body, encoding="utf-8")
        outputs[str(out)] = body
        for path, text in (extra or {}).items():
            Path(path).write_text(text, encoding="utf-8")
            outputs[str(path)] = text
        write_manifest(f"{out}.manifest.json", argv, config, inputs, outputs, started)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, argv):
    started = _now()
    kind = "continuous" if args.model in CONTINUOUS_MODELS else "categorical"
    schema = Schema(
        outcome=args.outcome,
        treatment=args.treatment,
        rr_terms=_terms(args.rr_terms),
        op_terms=_terms(args.op_terms),
        kind=kind,
        baseline=args.baseline_level,
        z_min=args.z_min,
        z_max=args.z_max,
        transform=args.transform,
        rescale=args.rescale,
    )
    path = _data_path(args.data)
    ds = load_csv(path, schema)
    opts = FitOptions(level=args.level, starts=args.starts)
    if args.model == "monotone":
        res = fit_monotone(ds, opts=opts)
    elif args.model == "gop":
        res = fit_gop(ds, opts=opts)
    elif args.model == "logistic":
        res = fit_logistic(ds, level=args.level)
    elif args.model == "poisson":
        res = fit_poisson_log(ds, level=args.level)
    elif args.model == "dr-mono":
        res = dr_monotone(ds, level=args.level)
    else:
        res = dr_categorical(ds, level=args.level)
    res.design["schema"] = schema.to_dict()
    body = res.to_json(indent=2) + "\n"
    config = {k: v for k, v in vars(args).items() if k != "out"}
    _emit(body, args.out, argv, config, [path], started)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def resolve_seed(flag):
    """Explicit flag, else ``$RELRISK_SEED``, else 1."""
    if flag is not None:
        return flag
    env = os.environ.get("RELRISK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise RelRiskError(f"RELRISK_SEED must be an integer, got {env!r}") from None
    return 1


def cmd_simulate(args, argv):
    started = _now()
    estimators = _terms(args.estimators) if args.estimators else None
    cfg = SimConfig(
        setting=args.setting, n=args.n, reps=args.reps, seed=resolve_seed(args.seed),
        estimators=estimators, level=args.level, threads=args.threads,
    )
    report = misspecified_op_twice(cfg) if cfg.setting == "op-twice" else run_mc(cfg)
    for note in report.notes:
        print(f"relrisk: {note}", file=sys.stderr)
    extra = {}
    if args.out is not None:
        stem = Path(args.out).with_suffix("")
        extra = {f"{stem}.json": report.to_json() + "\n", f"{stem}.raw.csv": report.raw_csv()}
    config = cfg.to_dict()
    _emit(report.to_csv(), args.out, argv, config, [], started, extra)
    return EXIT_OK


def cmd_predict(args, argv):
    started = _now()
    fit_path = Path(args.fit)
    try:
        fit = FitResult.from_json(fit_path.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise RelRiskError(f"cannot read fit file {fit_path}: {exc}") from None
    schema = fit.design.get("schema")
    if schema is None:
        raise RelRiskError("fit file has no schema; refit with 'relrisk fit'")
    path = _data_path(args.data)
    ds = load_covariates(path, Schema.from_dict(schema))
    grid = list(_terms(args.grid))
    pred = predict(fit, ds, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit_id", "z", "p_hat", "out_of_range"])
    for i in range(ds.n):
        for j, z in enumerate(grid):
            w.writerow([i + 1, z, repr(float(pred.p[i, j])), int(pred.out_of_range[i, j])])
    config = {k: v for k, v in vars(args).items() if k != "out"}
    _emit(buf.getvalue(), args.out, argv, config, [fit_path, path], started)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "predict": cmd_predict}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except (RelRiskError, OSError) as exc:
        print(f"relrisk: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
