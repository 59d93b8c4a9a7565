"""Command-line driver: ``longicausal {simulate,fit,contrast,diagnose,mc,long-to-wide}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every file is written to a temporary sibling and renamed into place, and
every run that writes files also writes its resolved configuration as JSON.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .effects import FitReport
from .errors import DataError, LongiCausalError, MissingFile, NumericalError
from .estimand import contrast_table
from .gest import fit_gmm_basic, fit_gmm_efficient, fit_sequential_all
from .iv import PARTIAL_OUT, SIGMA_SPECS, fit_iv_decay, partial_f_all
from .mc import ESTIMATORS, run_design
from .msm import fit_msm_all, fit_msm_decay
from .panel import ColumnSpec, load_panel, long_to_wide
from .simgen import PRESET_NAMES, flat_overrides, scenario_preset, simulate_panel
from .weights import balance_table, fit_weights, weight_diagnostics


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# output helpers


def _atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text(path: Path, text: str) -> None:
    _atomic_write(path, lambda p: p.write_text(text))


def write_csv(path: Path, df: pd.DataFrame) -> None:
    _atomic_write(path, lambda p: df.to_csv(p, index=False, float_format="%.17g"))


def _config_path(out: Path) -> Path:
    out = Path(out)
    return out / "config.json" if out.suffix == "" else out.with_name(out.stem + ".config.json")


def echo_config(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    write_text(_config_path(out), json.dumps(cfg, indent=2, default=str) + "\n")


def build_hash() -> str:
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.read_bytes())
    return h.hexdigest()[:12]


def _load(args) -> "PanelData":  # noqa: F821
    schema = ColumnSpec.from_json(args.schema) if getattr(args, "schema", None) else None
    if not Path(args.panel).exists():
        raise MissingFile(f"file not found: {args.panel}")
    return load_panel(args.panel, schema)


def _exclude(args) -> tuple[str, ...]:
    return tuple(x for x in (args.exclude or "").split(",") if x)


def _truncation(raw: str | None):
    if not raw:
        return None
    try:
        lo, hi = (float(x) for x in raw.split(","))
    except ValueError:
        raise UsageError("--truncate expects two percentiles, e.g. 0.1,99.9") from None
    if not 0 <= lo < hi <= 100:
        raise UsageError("--truncate percentiles must satisfy 0 <= lo < hi <= 100")
    return lo, hi


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = scenario_preset(args.preset)
    overrides = flat_overrides(args.set or [])
    if args.n is not None:
        overrides["n"] = args.n
    cfg = cfg.with_overrides(**overrides)
    panel = simulate_panel(cfg, args.seed)
    df = panel.to_frame()
    df = df.drop(columns=[c for c in cfg.estimation_exclude() if c in df.columns])
    write_csv(Path(args.out), df)
    echo_config(Path(args.out), args, {"scenario": cfg.to_dict()})
    return 0


def fit_from_args(panel, args) -> FitReport:
    exclude = _exclude(args)
    if args.method == "iptw":
        _, ws = fit_weights(panel, args.weights, exclude, _truncation(args.truncate))
        if args.structure == "decay":
            return fit_msm_decay(panel, ws)
        return fit_msm_all(panel, ws)
    if args.method == "gest":
        if args.flavor == "efficient":
            return fit_gmm_efficient(panel, args.structure, exclude)
        report = fit_gmm_basic(panel, args.structure, exclude)
        if args.flavor == "sequential":
            if args.structure != "saturated":
                raise UsageError("the sequential flavor fits the saturated structure only")
            # identical point estimates; the basic-GMM sandwich applies unchanged
            report.params = fit_sequential_all(panel, exclude)
            report.estimator = "gest-sequential"
        return report
    fit = fit_iv_decay(panel, args.sigma, seed=args.seed, partial_out_on=args.partial_out, exclude=exclude)
    return fit.to_report()


def cmd_fit(args) -> int:
    _truncation(args.truncate)
    panel = _load(args)
    report = fit_from_args(panel, args)
    text = report.to_json(indent=2) + "\n"
    if args.out:
        write_text(Path(args.out), text)
        echo_config(Path(args.out), args)
    else:
        sys.stdout.write(text)
    if args.csv:
        write_csv(Path(args.csv), report.coefficient_table())
    return 0


def cmd_contrast(args) -> int:
    fits = {}
    for item in args.report:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if not Path(path).exists():
            raise MissingFile(f"file not found: {path}")
        fits[name] = FitReport.from_json(Path(path).read_text())
    ks = [int(k) for k in args.k.split(",")] if args.k else None
    table = contrast_table(fits, ks, args.a_high, args.a_low, args.draws, args.level, args.seed)
    if args.out:
        write_csv(Path(args.out), table)
        echo_config(Path(args.out), args)
    else:
        sys.stdout.write(table.to_csv(index=False))
    return 0


def cmd_diagnose(args) -> int:
    _truncation(args.truncate)
    panel = _load(args)
    exclude = _exclude(args)
    _, ws = fit_weights(panel, args.weights, exclude, _truncation(args.truncate))
    out = Path(args.out_dir)
    write_csv(out / "weight_diagnostics.csv", weight_diagnostics(ws).to_frame())
    write_csv(out / "balance.csv", balance_table(panel, ws, exclude, which=args.balance_weights))
    if panel.G is not None:
        F = partial_f_all(panel, exclude)
        write_csv(out / "partial_f.csv", pd.DataFrame({"time": np.arange(1, panel.K + 1), "partial_F": F}))
    echo_config(out, args)
    return 0


def cmd_mc(args) -> int:
    estimators = [e for e in args.estimators.split(",") if e]
    for e in estimators:
        if e not in ESTIMATORS:
            raise UsageError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
    cfg = scenario_preset(args.design).with_overrides(**flat_overrides(args.set or []))
    res = run_design(cfg, estimators, args.reps, args.seed, n_jobs=args.jobs)
    out = Path(args.out)
    write_csv(out / "replicates.csv", res.records)
    write_csv(out / "summary.csv", res.summary)
    if not res.diagnostics.empty:
        write_csv(out / "weight_diagnostics.csv", res.diagnostics)
    echo_config(out, args, {"scenario": cfg.to_dict(), "failures": res.failures})
    return 0


def cmd_long_to_wide(args) -> int:
    if not Path(args.input).exists():
        raise MissingFile(f"file not found: {args.input}")
    df = pd.read_csv(args.input, float_precision="round_trip")
    wide = long_to_wide(df, args.id, args.time, [v for v in args.values.split(",") if v])
    write_csv(Path(args.out), wide)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="longicausal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print version and build hash")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a simulated panel as wide CSV")
    s.add_argument("--preset", required=True, choices=PRESET_NAMES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="scenario override (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one estimator to a panel")
    f.add_argument("--panel", required=True)
    f.add_argument("--schema", help="column spec as JSON text or file")
    f.add_argument("--method", required=True, choices=("iptw", "gest", "iv"))
    f.add_argument("--flavor", default="efficient", choices=("sequential", "basic", "efficient"))
    f.add_argument("--structure", default="saturated", choices=("saturated", "decay"))
    f.add_argument("--weights", default="balanced", choices=("gaussian", "balanced"))
    f.add_argument("--truncate", help="percentile pair lo,hi for weight truncation")
    f.add_argument("--sigma", default="identity", choices=SIGMA_SPECS)
    f.add_argument("--partial-out", default="baseline", choices=PARTIAL_OUT)
    f.add_argument("--exclude", help="comma-separated baseline columns to withhold")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", help="report JSON path (stdout when omitted)")
    f.add_argument("--csv", help="also write a coefficient table")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("contrast", help="regime contrasts with bootstrap intervals")
    c.add_argument("--report", required=True, action="append", metavar="[NAME=]PATH")
    c.add_argument("--k", help="comma-separated outcome times (default: all)")
    c.add_argument("--a-high", type=float, default=1.0)
    c.add_argument("--a-low", type=float, default=0.0)
    c.add_argument("--draws", type=int, default=1000)
    c.add_argument("--level", type=float, default=0.95)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_contrast)

    d = sub.add_parser("diagnose", help="weight diagnostics, balance table, partial F")
    d.add_argument("--panel", required=True)
    d.add_argument("--schema")
    d.add_argument("--weights", default="balanced", choices=("gaussian", "balanced"))
    d.add_argument("--balance-weights", default="step", choices=("step", "cumulative"))
    d.add_argument("--truncate")
    d.add_argument("--exclude")
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("mc", help="Monte Carlo experiment over one design")
    m.add_argument("--design", required=True, choices=PRESET_NAMES)
    m.add_argument("--estimators", default="iptw,gest-basic,gest-efficient,iv")
    m.add_argument("--reps", type=int, default=500)
    m.add_argument("--seed", type=int, default=20240101)
    m.add_argument("--jobs", type=int, help="worker processes (default: LONGICAUSAL_THREADS or 1)")
    m.add_argument("--set", action="append", metavar="KEY=VALUE")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_mc)

    w = sub.add_parser("long-to-wide", help="pivot a long panel to the wide layout")
    w.add_argument("--input", required=True)
    w.add_argument("--id", required=True)
    w.add_argument("--time", required=True)
    w.add_argument("--values", required=True, help="comma-separated per-visit columns")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_long_to_wide)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(f"longicausal {__version__} ({build_hash()})")
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except LongiCausalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
