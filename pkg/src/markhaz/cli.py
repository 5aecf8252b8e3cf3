"""Command-line entry point: ``markhaz {fit,bandwidth,simulate,bench,validate}``.

Exit codes are 0 on success, 1 on usage errors and 2 on data, fitting or
simulation errors.  Every option can also come from an INI file passed
with ``--config``; keys live in a section named after the subcommand (or a
shared ``[markhaz]`` section) and use the long option name.  Explicit flags
override file values, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import sys
from pathlib import Path


from . import __version__
from ._json import SCHEMA_VERSION, dumps
from .bandwidth import CandidateGrid, parse_grid, select_per_mark, select_uniform
from .data import atomic_write_text, build_analytical_dataset, read_gap_csv, validate, write_gap_csv
from .errors import BoundaryMark, MarkHazError
from .estimator import FitOptions, MarkCurve, fit_grid
from .harness import study_for_setting, run_replications
from .inference import DEFAULT_VARIANT, RESIDUAL_VARIANTS, SE_CONVENTION, hazard_ratio_table, robust_inference
from .kernels import Kernel, effective_event_count, parse_kernel
from .simulate import SimConfig, calibrate_censoring, generate_dataset, truth_summary

__all__ = ["main", "dispatch", "export_plot_data", "build_parser"]



# Options that affect how a run executes but not what it computes; they are
# left out of the metadata echo so outputs do not depend on them.
_EXECUTION_ONLY = {"config", "threads", "log_level", "out", "plot_data", "truth", "data", "command", "func"}

PLOT_COLUMNS = ("covariate", "mark", "hr", "ci_low", "ci_high", "converged")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    if ":" in text:
        return [float(x) for x in parse_grid(text)]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list or start:stop:step, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
    return parts[0], parts[1]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with option values")
    p.add_argument("--threads", type=int, default=1, help="worker count (results do not depend on it)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_fit_options(p: argparse.ArgumentParser):
    p.add_argument("--kernel", default=Kernel.EPANECHNIKOV.value)
    p.add_argument("--no-interior-guard", action="store_true", help="allow marks outside [h, 1-h]")
    p.add_argument("--min-effective-events", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-8, help="score tolerance per effective event")
    p.add_argument("--max-iter", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markhaz", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"markhaz {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="fit mark-specific models over a mark grid")
    _add_common(p)
    p.add_argument("--data", required=True, help="gap-record CSV")
    p.add_argument("--marks", type=_float_list, required=True, help="comma list or start:stop:step")
    p.add_argument("--bandwidth", type=_float_list, help="common bandwidth or one per mark")
    p.add_argument("--target-events", type=int, help="choose h per mark to capture this many events")
    p.add_argument("--grid", default="0.05:0.80:0.01", help="candidate bandwidths for --target-events")
    p.add_argument("--mark-range", type=_pair, help="raw mark support lo,hi for rescaling to [0, 1]")
    p.add_argument("--residual-variant", default=DEFAULT_VARIANT, choices=RESIDUAL_VARIANTS)
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--out", help="JSON output path (default: stdout)")
    p.add_argument("--plot-data", help="long-format CSV of hazard ratios for plotting")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bandwidth", help="bandwidth selection")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--marks", type=_float_list, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--grid", default="0.05:0.80:0.01")
    p.add_argument("--mode", choices=["uniform", "per-mark"], default="uniform")
    p.add_argument("--target-events", type=int, default=1000)
    p.add_argument("--n-splits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mark-range", type=_pair)
    p.add_argument("--out")
    _add_fit_options(p)
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("simulate", help="generate recurrent gap-time data")
    _add_common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--J", type=int, default=5)
    p.add_argument("--beta0", type=float, default=0.3)
    p.add_argument("--beta1", type=float, default=-0.5)
    p.add_argument("--beta2", type=float, default=0.5)
    p.add_argument("--form", choices=["linear", "quadratic"], default="linear")
    p.add_argument("--rho", type=float, default=0.25, help="frailty variance share")
    p.add_argument("--censor", default="target=0.25", help="tau=<x> or target=<fraction>")
    p.add_argument("--pilot-n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="sidecar JSON with the generating truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="seeded replication study")
    _add_common(p)
    p.add_argument("--setting", choices=["lin1", "lin2", "quad1", "quad2", "custom"], default="lin1")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-events", type=int, help="per-mark policy target (default n)")
    p.add_argument("--n-splits", type=int, default=1)
    p.add_argument("--residual-variant", default=DEFAULT_VARIANT, choices=RESIDUAL_VARIANTS)
    p.add_argument("--beta0", type=float, default=0.3, help="custom setting only")
    p.add_argument("--beta1", type=float, default=-0.5, help="custom setting only")
    p.add_argument("--beta2", type=float, default=0.5, help="custom setting only")
    p.add_argument("--form", choices=["linear", "quadratic"], default="linear", help="custom setting only")
    p.add_argument("--policy", choices=["per-mark", "uniform"], default="per-mark", help="custom setting only")
    p.add_argument("--out", required=True, help="summary CSV; metadata goes to <out>.meta.json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="check a gap-record CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mark-range", type=_pair)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)
    return parser


# -- config files -----------------------------------------------------------


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_defaults(sub: argparse.ArgumentParser, path: str, command: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    for section in cp.sections():
        if section not in ("markhaz", command):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                try:
                    value = cp.getboolean(section, key)
                except ValueError:
                    raise UsageError(f"{path}: {key} must be a boolean") from None
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"{path}: bad value for {key}: {exc}") from None
                if action.choices is not None and value not in action.choices:
                    raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
            # The command-specific section wins over the shared one.
            if section == command or dest not in out:
                out[dest] = value
    unknown = [s for s in cp.sections() if s not in ("markhaz",) and s not in _COMMANDS]
    if unknown:
        raise UsageError(f"{path}: unknown section(s) {unknown}")
    return out


_COMMANDS = ("fit", "bandwidth", "simulate", "bench", "validate")


def _prescan_config(argv) -> tuple[str | None, str | None]:
    """Subcommand and ``--config`` path, found before full parsing."""
    command = next((a for a in argv if a in _COMMANDS), None)
    path = None
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            path = argv[k + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def parse_args(argv):
    parser = build_parser()
    command, path = _prescan_config(argv)
    if command is not None and path is not None:
        sub = _subparser(parser, command)
        defaults = _config_defaults(sub, path, command)
        # Required options may come from the file.
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers ----------------------------------------------------------------


def _metadata(args, **extra) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _EXECUTION_ONLY}
    meta = {
        "schema_version": SCHEMA_VERSION,
        "tool": "markhaz",
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config": config,
        "se_convention": SE_CONVENTION,
        "residual_variant": getattr(args, "residual_variant", None),
    }
    meta.update(extra)
    return meta


def _emit(text: str, path: str | None):
    if path:
        atomic_write_text(path, text)
    else:
        sys.stdout.write(text)


def _fit_options(args) -> FitOptions:
    return FitOptions(
        tol_score=args.tol,
        max_iter=args.max_iter,
        interior_guard=not args.no_interior_guard,
        min_effective_events=args.min_effective_events,
    )


def _load(args):
    subjects, zcols = read_gap_csv(args.data)
    return build_analytical_dataset(subjects, mark_range=args.mark_range, covariate_names=zcols)


def _checked_marks(marks):
    if not marks:
        raise UsageError("--marks is empty")
    if any(b <= a for a, b in zip(marks, marks[1:])):
        raise UsageError("--marks must be strictly increasing")
    return marks


# -- subcommands ------------------------------------------------------------


def export_plot_data(curve: MarkCurve, sandwiches, path, names=None, level: float = 0.95) -> None:
    """Write a long-format ``covariate, mark, hr, ci_low, ci_high, converged`` CSV.

    ``sandwiches`` holds one SandwichResult (or None) per fit.  Rows for a
    non-converged mark keep the mark with empty HR fields.
    """
    if len(curve) == 0:
        raise ValueError("curve is empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for fit, sw in zip(curve.fits, sandwiches):
        for row in hazard_ratio_table(fit, sw, level, names):
            ok = fit.converged and sw is not None
            cells = [row[c] if ok else math.nan for c in ("hr", "ci_low", "ci_high")]
            w.writerow(
                [row["covariate"], repr(float(fit.v))]
                + ["" if not math.isfinite(x) else repr(float(x)) for x in cells]
                + ["true" if ok else "false"]
            )
    atomic_write_text(path, buf.getvalue())


def read_plot_data(path) -> list[dict]:
    """Parse a file written by :func:`export_plot_data`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "covariate": r["covariate"],
                    "mark": float(r["mark"]),
                    "hr": float(r["hr"]) if r["hr"] else None,
                    "ci_low": float(r["ci_low"]) if r["ci_low"] else None,
                    "ci_high": float(r["ci_high"]) if r["ci_high"] else None,
                    "converged": r["converged"] == "true",
                }
            )
    return rows


def cmd_fit(args) -> int:
    marks = _checked_marks(args.marks)
    kernel = parse_kernel(args.kernel)
    opts = _fit_options(args)
    if (args.bandwidth is None) == (args.target_events is None) and kernel.localized:
        raise UsageError("give exactly one of --bandwidth or --target-events")
    ds = _load(args)
    if not kernel.localized:
        hs = [None] * len(marks)
    elif args.bandwidth is not None:
        hs = args.bandwidth
        if len(hs) == 1:
            hs = hs * len(marks)
        if len(hs) != len(marks):
            raise UsageError(f"{len(hs)} bandwidths given for {len(marks)} marks")
    else:
        grid = parse_grid(args.grid)
        hs = []
        for v in marks:
            cap = min(v, 1.0 - v) if opts.interior_guard else None
            hs.append(select_per_mark(ds, v, grid, args.target_events, max_h=cap))
    if kernel.localized and opts.interior_guard:
        for v, h in zip(marks, hs):
            if not (h > 0):
                raise UsageError(f"bandwidth must be > 0, got {h}")
            if v < h - 1e-12 or v > 1.0 - h + 1e-12:
                raise BoundaryMark(f"mark {v} outside the interior window [h, 1-h] for h={h}")
    curve = fit_grid(ds, marks, hs if kernel.localized else 1.0, kernel, opts, threads=args.threads)
    names = list(ds.covariate_names) or None
    sandwiches, entries = [], []
    for fit in curve.fits:
        sw = None
        if fit.converged:
            try:
                sw = robust_inference(ds, fit, args.residual_variant)
            except MarkHazError as exc:
                fit.error = f"{type(exc).__name__}: {exc}"
        sandwiches.append(sw)
        table = hazard_ratio_table(fit, sw, args.level, names)
        entries.append(
            {
                "v": fit.v,
                "h": fit.h,
                "kernel": fit.kernel,
                "covariates": [r["covariate"] for r in table],
                "beta": [r["beta"] for r in table],
                "se": [r["se"] for r in table],
                "hr": [r["hr"] for r in table],
                "ci_low": [r["ci_low"] for r in table],
                "ci_high": [r["ci_high"] for r in table],
                "p_value": [r["p_value"] for r in table],
                "converged": bool(fit.converged and sw is not None),
                "iterations": fit.iterations,
                "effective_events": fit.effective_events,
                "residual_variant": args.residual_variant,
                "error": fit.error,
            }
        )
    doc = {
        "metadata": _metadata(args, dataset_fingerprint=ds.fingerprint),
        "dataset": {"n_subjects": ds.n, "n_records": ds.n_records, "n_events": ds.n_events},
        "fits": entries,
    }
    _emit(dumps(doc), args.out)
    if args.plot_data:
        export_plot_data(curve, sandwiches, args.plot_data, names, args.level)
    failed = [e for e in entries if not e["converged"]]
    for e in failed:
        print(f"markhaz: fit at mark {e['v']} failed: {e['error']}", file=sys.stderr)
    return 2 if failed else 0


def cmd_bandwidth(args) -> int:
    marks = _checked_marks(args.marks)
    kernel = parse_kernel(args.kernel)
    opts = _fit_options(args)
    ds = _load(args)
    hs = parse_grid(args.grid)
    meta = _metadata(args, dataset_fingerprint=ds.fingerprint)
    if args.mode == "uniform":
        grid = CandidateGrid(hs=tuple(hs), marks=tuple(marks), split_seed=args.seed, n_splits=args.n_splits)
        rep = select_uniform(ds, grid, kernel, opts)
        doc = {"metadata": meta, "mode": "uniform", "report": rep.to_dict()}
    else:
        chosen = []
        for v in marks:
            cap = min(v, 1.0 - v) if opts.interior_guard else None
            h = select_per_mark(ds, v, hs, args.target_events, max_h=cap)
            chosen.append({"v": v, "h": h, "effective_events": effective_event_count(ds, v, h)})
        doc = {"metadata": meta, "mode": "per-mark", "target_events": args.target_events, "chosen": chosen}
    _emit(dumps(doc), args.out)
    return 0


def _parse_censor(text: str) -> tuple[str, float]:
    key, sep, value = text.partition("=")
    if not sep or key not in ("tau", "target"):
        raise UsageError(f"--censor must be tau=<x> or target=<fraction>, got {text!r}")
    try:
        return key, float(value)
    except ValueError:
        raise UsageError(f"--censor value {value!r} is not a number") from None


def cmd_simulate(args) -> int:
    key, value = _parse_censor(args.censor)
    try:
        cfg = SimConfig(
            n=args.n, J=args.J, beta0=args.beta0, beta1=args.beta1, beta2=args.beta2,
            beta_form=args.form, rho=args.rho, pilot_n=args.pilot_n, seed=args.seed,
            tau_c=value if key == "tau" else None,
            censor_target=value if key == "target" else 0.25,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cal = calibrate_censoring(cfg)
    subjects, truths, tau = generate_dataset(cfg, tau_c=cal.tau_c)
    write_gap_csv(subjects, args.out)
    if args.truth:
        doc = {
            "metadata": _metadata(args),
            "calibration": {
                "tau_c": cal.tau_c,
                "pilot_censored_fraction": cal.achieved,
                "target": cal.target if key == "target" else None,
                "pilot_n": cal.pilot_n,
            },
            "truth": truth_summary(cfg, truths, tau),
        }
        atomic_write_text(args.truth, dumps(doc))
    return 0


def cmd_bench(args) -> int:
    params = None
    if args.setting == "custom":
        params = dict(
            beta_form=args.form, beta0=args.beta0, beta1=args.beta1, beta2=args.beta2,
            policy="per_mark" if args.policy == "per-mark" else "uniform",
        )
    study = study_for_setting(
        args.setting, n=args.n, replications=args.reps, master_seed=args.seed, params=params,
        target_events=args.target_events, n_splits=args.n_splits, residual_variant=args.residual_variant,
    )
    table = run_replications(study, threads=args.threads)
    atomic_write_text(args.out, table.to_csv())
    extra = {k: v for k, v in table.metadata.items() if k not in ("version", "se_convention", "residual_variant")}
    meta = _metadata(args, **extra)
    atomic_write_text(str(Path(args.out)) + ".meta.json", dumps(meta))
    return 0


def cmd_validate(args) -> int:
    subjects, zcols = read_gap_csv(args.data)
    ds = build_analytical_dataset(subjects, mark_range=args.mark_range, covariate_names=zcols)
    rep = validate(ds)
    doc = {"metadata": _metadata(args, dataset_fingerprint=ds.fingerprint), "report": rep.to_dict()}
    _emit(dumps(doc), args.out)
    return 0 if rep.ok else 2


# -- entry ------------------------------------------------------------------


def dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"markhaz: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("markhaz: usage error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"markhaz: usage error: {exc}", file=sys.stderr)
        return 1
    except (MarkHazError, OSError) as exc:
        print(f"markhaz: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"markhaz: usage error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
