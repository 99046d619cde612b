"""
Command-line interface: ``vbsar {simulate, estimate, mc, rolling, irf}``.

Settings are resolved as built-in defaults, then an INI-style ``--config``
file, then command-line flags. Every command writes a ``manifest.json``
(resolved settings, seed and library versions) beside its outputs.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numerical
error, 5 some equations did not converge.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .exceptions import ConfigError, HarnessError, InputError, NumericalError, VBSARError
from .model import EstimatorConfig, PanelData, SarEstimate, estimate_sar
from .simulate import (DGPSpec, Model2Params, corner_report, run_monte_carlo, simulate,
                       write_beta_csv, write_summary_csv)
from .spatial_analysis import (VARIABLES, CouplingSpec, assemble_system, build_system_panel,
                               impulse_response, rolling_estimate,
                               spillover_rows, weight_average_rows, write_tidy_csv)
from .stage1 import Stage1Config
from .stage2 import Stage2Config

__all__ = ["main", "read_panel_csv", "write_panel_csv", "load_config"]

logger = logging.getLogger("vbsar")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4, 5
THREADS_ENV = "VBSAR_THREADS"


# ---------------------------------------------------------------- panel files

def write_panel_csv(panel: PanelData, path) -> None:
    """Wide layout: ``time``, one column per unit, then ``<unit>__<var>`` columns."""
    header = ["time", *panel.unit_labels]
    cols = [panel.Y[:, i] for i in range(panel.N)]
    for u, block, names in zip(panel.unit_labels, panel.X_blocks, panel.exog_names):
        for k, name in enumerate(names):
            header.append(f"{u}__{name}")
            cols.append(block[:, k])
    data = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(panel.time_labels, data):
            w.writerow([t, *(f"{v:.17g}" for v in row)])


def read_panel_csv(path, endogenous: List[str] = (), instruments: List[str] = ()) -> PanelData:
    """Parse a wide panel CSV.

    Columns without ``__`` are unit outcomes; ``<unit>__<var>`` columns go to
    that unit's exogenous block in file order. Variables named in
    ``endogenous`` are flagged as contemporaneous endogenous regressors, and
    columns named in ``instruments`` are used as extra first-stage regressors
    only.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read panel {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "time":
        raise InputError(f"{path}: first column header must be 'time', got {header[:1]}")
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column headers")
    missing_inst = [c for c in instruments if c not in header]
    if missing_inst:
        raise InputError(f"{path}: missing instrument column(s) {missing_inst}")
    units = [h for h in header[1:] if "__" not in h and h not in instruments]
    exog: Dict[str, List[str]] = {u: [] for u in units}
    for h in header[1:]:
        if "__" in h and h not in instruments:
            u, var = h.split("__", 1)
            if u not in exog:
                raise InputError(f"{path}: column '{h}' refers to unknown unit '{u}'")
            exog[u].append(var)
    for u, names in exog.items():
        if not names:
            raise InputError(f"{path}: unit '{u}' has no exogenous columns (expected header '{u}__<var>')")
    times, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        times.append(row[0])
        vals = []
        for c, cell in enumerate(row[1:], start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise InputError(f"{path}: row {r}, column '{header[c]}': cannot parse {cell!r}") from None
        values.append(vals)
    if not values:
        raise InputError(f"{path}: no data rows")
    data = np.asarray(values)
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        r, c = bad[0]
        raise InputError(f"{path}: non-finite entry at row {r + 2}, column '{header[c + 1]}'")
    col = {h: k for k, h in enumerate(header[1:])}
    Y = np.column_stack([data[:, col[u]] for u in units])
    blocks = [np.column_stack([data[:, col[f"{u}__{v}"]] for v in exog[u]]) for u in units]
    endog_idx = [[k for k, v in enumerate(exog[u]) if v in endogenous] for u in units]
    inst = np.column_stack([data[:, col[c]] for c in instruments]) if instruments else None
    return PanelData(Y=Y, X_blocks=blocks, unit_labels=units, time_labels=times,
                     exog_names=[exog[u] for u in units], endogenous_columns=endog_idx,
                     instruments=inst)


def _write_matrix(path, M, row_labels, col_labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *col_labels])
        for lab, row in zip(row_labels, M):
            w.writerow([lab, *(f"{v:.17g}" for v in row)])


# ---------------------------------------------------------------- configuration

def _convert(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.split(","))
    return value.strip()


def _apply(cls, section: Dict[str, str], name: str, base=None):
    """Build dataclass ``cls`` from string overrides, rejecting unknown keys."""
    base = base if base is not None else cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            kwargs[key] = _convert(raw, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return dataclasses.replace(base, **kwargs)


def load_config(path: Optional[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    return cp


def _section(cp, name) -> Dict[str, str]:
    return dict(cp[name]) if cp.has_section(name) else {}


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def _estimator_config(cp, args) -> EstimatorConfig:
    s1 = dict(_section(cp, "stage1"))
    s2 = dict(_section(cp, "stage2"))
    est = dict(_section(cp, "estimator"))
    if getattr(args, "tol", None) is not None:
        s1["tol"] = s2["tol"] = str(args.tol)
    if getattr(args, "a", None) is not None:
        s1["concentration_a"] = str(args.a)
    if getattr(args, "a_omega", None) is not None:
        s1["concentration_a_omega"] = str(args.a_omega)
    if getattr(args, "a_tilde", None) is not None:
        s2["concentration_a_tilde"] = str(args.a_tilde)
    if getattr(args, "shared_first_stage", False):
        est["shared_first_stage"] = "true"
    stage1 = _apply(Stage1Config, s1, "stage1")
    stage2 = _apply(Stage2Config, s2, "stage2")
    try:
        threads = args.threads if args.threads is not None else int(est.pop("workers", _default_threads()))
        seed = args.seed if args.seed is not None else int(est.pop("seed", 0))
    except ValueError as exc:
        raise ConfigError(f"[estimator] {exc}") from None
    est.pop("workers", None)
    est.pop("seed", None)
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed}")
    base = EstimatorConfig(stage1=stage1, stage2=stage2, seed=seed, workers=threads)
    return _apply(EstimatorConfig, est, "estimator", base)


def _dgp_spec(cp, args) -> DGPSpec:
    sec = dict(_section(cp, "dgp"))
    for key in ("model", "N", "T"):
        if getattr(args, key, None) is not None:
            sec[key] = str(getattr(args, key))
    m2 = {k[len("model2."):]: sec.pop(k) for k in list(sec) if k.startswith("model2.")}
    params = _apply(Model2Params, m2, "dgp model2")
    spec = _apply(DGPSpec, sec, "dgp", DGPSpec(params=params))
    return spec


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_manifest(out: Path, command: str, settings: dict, seed) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "settings": _jsonable(settings),
        "versions": {"vbsar": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _groups(cp, args, unit_labels) -> Dict[str, List[int]]:
    raw = dict(_section(cp, "groups"))
    for spec in args.group or []:
        if "=" not in spec:
            raise ConfigError(f"--group expects NAME=unit1,unit2, got {spec!r}")
        name, members = spec.split("=", 1)
        raw[name.strip()] = members
    groups = {}
    for name, members in raw.items():
        labels = [m.strip() for m in members.split(",") if m.strip()]
        if not labels:
            raise InputError(f"group {name!r} is empty")
        unknown = [m for m in labels if m not in unit_labels]
        if unknown:
            raise InputError(f"group {name!r} names unknown units {unknown}")
        groups[name] = [unit_labels.index(m) for m in labels]
    if not groups:
        raise InputError("no unit groups defined (use [groups] in the config or --group)")
    return groups


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cp) -> int:
    spec = _dgp_spec(cp, args)
    seed = args.seed if args.seed is not None else int(_section(cp, "estimator").get("seed", 0))
    out = _out_dir(args)
    sim = simulate(spec, seed)
    write_panel_csv(sim.panel, out / "panel.csv")
    labels = sim.panel.unit_labels
    _write_matrix(out / "truth_lambda.csv", sim.truth.lambda_true, labels, labels)
    with open(out / "truth_beta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "variable", "beta"])
        for u, b in zip(labels, sim.truth.beta_true):
            w.writerow([u, "x", f"{b:.17g}"])
    _write_manifest(out, "simulate", {"dgp": spec}, seed)
    print(f"wrote {sim.panel.T} x {sim.panel.N} panel to {out / 'panel.csv'}")
    return EXIT_OK


def _write_estimate(out: Path, est: SarEstimate, prefix: str = "") -> None:
    labels = est.unit_labels
    _write_matrix(out / f"{prefix}lambda.csv", est.lambda_, labels, labels)
    with open(out / f"{prefix}beta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "variable", "beta"])
        for u, beta, names in zip(labels, est.beta_by_unit, est.exog_names):
            for b, n in zip(beta, names):
                w.writerow([u, n, f"{b:.17g}"])
    with open(out / f"{prefix}sigma2.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "sigma2"])
        for u, s in zip(labels, est.sigma2):
            w.writerow([u, f"{s:.17g}"])
    with open(out / f"{prefix}convergence.jsonl", "w") as fh:
        for log in est.logs:
            fh.write(json.dumps(dataclasses.asdict(log), sort_keys=True) + "\n")
    (out / f"{prefix}stability.json").write_text(json.dumps(dataclasses.asdict(est.diagnostics)) + "\n")


def _warn_stability(est: SarEstimate, what: str = "") -> None:
    if not est.diagnostics.stable:
        print(f"warning: {what}estimated Lambda has spectral radius "
              f"{est.diagnostics.spectral_radius:.4f} >= 1", file=sys.stderr)


def cmd_estimate(args, cp) -> int:
    config = _estimator_config(cp, args)
    sec = _section(cp, "panel")
    endog = [v.strip() for v in sec.get("endogenous", "").split(",") if v.strip()]
    inst = [v.strip() for v in sec.get("instruments", "").split(",") if v.strip()]
    panel = read_panel_csv(args.panel, endog, inst)
    out = _out_dir(args)
    est = estimate_sar(panel, config)
    _write_estimate(out, est)
    _write_manifest(out, "estimate", {"panel": str(args.panel), "estimator": config,
                                      "endogenous": endog, "instruments": inst}, config.seed)
    _warn_stability(est)
    print(f"spectral radius of Lambda: {est.diagnostics.spectral_radius:.6f}")
    if not est.converged:
        print("warning: some equations did not converge; see convergence.jsonl", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_mc(args, cp) -> int:
    config = _estimator_config(cp, args)
    spec = _dgp_spec(cp, args)
    reps = args.replications if args.replications is not None else int(_section(cp, "mc").get("replications", 100))
    out = _out_dir(args)
    # replications run across the pool; each replication's equations run serially
    inner = dataclasses.replace(config, workers=1)
    summary = run_monte_carlo(spec, inner, reps, seed=config.seed, workers=config.workers)
    write_summary_csv(summary, out / "summary.csv")
    write_beta_csv(summary, out / "beta_summary.csv")
    report = corner_report(summary, min(5, spec.N // 2))
    (out / "corner_report.txt").write_text(report + "\n")
    _write_manifest(out, "mc", {"dgp": spec, "estimator": config, "replications": reps}, config.seed)
    print(report)
    print(f"mean runtime per replication: {summary.mean_runtime_seconds:.2f} s")
    return EXIT_PARTIAL if summary.nonconverged else EXIT_OK


def _system_inputs(cp, args):
    sec = _section(cp, "system")
    rate_path = args.rate_panel or sec.get("rate_panel")
    spread_path = args.spread_panel or sec.get("spread_panel")
    if not rate_path or not spread_path:
        raise ConfigError("both rate and spread panel paths are required")
    coupling = _apply(CouplingSpec, {k: v for k, v in sec.items() if k not in ("rate_panel", "spread_panel")},
                      "system")
    rate = read_panel_csv(rate_path)
    spread = read_panel_csv(spread_path)
    return build_system_panel(rate, spread, coupling), coupling


def cmd_rolling(args, cp) -> int:
    config = _estimator_config(cp, args)
    sec = _section(cp, "rolling")
    window = args.window if args.window is not None else int(sec.get("window", 24))
    horizon = args.horizon if args.horizon is not None else int(sec.get("horizon", 60))
    threshold = args.threshold if args.threshold is not None else float(sec.get("threshold", 0.01))
    system_panel, coupling = _system_inputs(cp, args)
    groups = _groups(cp, args, system_panel.rate.unit_labels)
    out = _out_dir(args)
    windows = rolling_estimate(system_panel, window, config)
    spill, weights, partial = [], [], False
    with open(out / "windows.jsonl", "w") as fh:
        for w in windows:
            system = assemble_system(w.rate, w.spread, coupling, groups)
            if not system.singular:
                spill.extend(spillover_rows(w.window_start, system, horizon))
            weights.extend(weight_average_rows(w.window_start, w.rate, w.spread, groups, threshold))
            partial |= not (w.rate.converged and w.spread.converged)
            fh.write(json.dumps({
                "window_start": w.window_start,
                "rate_spectral_radius": w.rate.diagnostics.spectral_radius,
                "spread_spectral_radius": w.spread.diagnostics.spectral_radius,
                "contemporaneous_condition": system.condition_number,
                "converged": w.rate.converged and w.spread.converged,
            }, sort_keys=True) + "\n")
    write_tidy_csv(spill, out / "spillovers.csv")
    write_tidy_csv(weights, out / "weight_averages.csv", extra_columns=("empty",))
    _write_manifest(out, "rolling", {"estimator": config, "window": window, "horizon": horizon,
                                     "threshold": threshold, "coupling": coupling, "groups": groups},
                    config.seed)
    print(f"estimated {len(windows)} windows of length {window}")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_irf(args, cp) -> int:
    config = _estimator_config(cp, args)
    sec = _section(cp, "rolling")
    horizon = args.horizon if args.horizon is not None else int(sec.get("horizon", 60))
    system_panel, coupling = _system_inputs(cp, args)
    groups = _groups(cp, args, system_panel.rate.unit_labels)
    out = _out_dir(args)
    rate = estimate_sar(system_panel.rate, config)
    spread = estimate_sar(system_panel.spread, config)
    _write_estimate(out, rate, "rate_")
    _write_estimate(out, spread, "spread_")
    system = assemble_system(rate, spread, coupling, groups)
    if system.singular:
        raise NumericalError(f"contemporaneous matrix is singular (condition number {system.condition_number:.3e})")
    labels = system.unit_labels
    with open(out / "irf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shock_unit", "shock_variable", "horizon",
                    *(f"{u}__{v}" for v in VARIABLES for u in labels)])
        for var in VARIABLES:
            for s, u in enumerate(labels):
                e = np.zeros(2 * system.N)
                e[system.offset(var) + s] = 1.0
                for h, row in enumerate(impulse_response(system, e, horizon)):
                    w.writerow([u, var, h, *(f"{v:.17g}" for v in row)])
    write_tidy_csv(spillover_rows("full_sample", system, horizon), out / "spillovers.csv")
    _write_manifest(out, "irf", {"estimator": config, "horizon": horizon, "coupling": coupling,
                                 "groups": groups}, config.seed)
    _warn_stability(rate, "rate: ")
    _warn_stability(spread, "spread: ")
    print(f"wrote impulse responses for {2 * system.N} shocks over {horizon} periods")
    return EXIT_OK if rate.converged and spread.converged else EXIT_PARTIAL


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help=f"worker-pool width (default ${THREADS_ENV} or 1)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--verbose", "-v", action="store_true")

    est = argparse.ArgumentParser(add_help=False)
    est.add_argument("--tol", type=float, help="convergence tolerance for both stages")
    est.add_argument("--a", type=float, help="first-stage coefficient D-L concentration")
    est.add_argument("--a-omega", dest="a_omega", type=float, help="precision off-diagonal D-L concentration")
    est.add_argument("--a-tilde", dest="a_tilde", type=float, help="second-stage D-L concentration")
    est.add_argument("--shared-first-stage", action="store_true",
                     help="fit one reduced form for all units instead of one per equation")

    dgp = argparse.ArgumentParser(add_help=False)
    dgp.add_argument("--model", choices=("model1", "model2"))
    dgp.add_argument("--N", type=int)
    dgp.add_argument("--T", type=int)

    system = argparse.ArgumentParser(add_help=False)
    system.add_argument("--rate-panel", dest="rate_panel")
    system.add_argument("--spread-panel", dest="spread_panel")
    system.add_argument("--group", action="append", metavar="NAME=u1,u2",
                        help="unit group for spillover averages (repeatable)")
    system.add_argument("--horizon", type=int)

    p = argparse.ArgumentParser(prog="vbsar", description="Two-stage variational Bayes for unrestricted panel SAR models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, dgp], help="simulate a Monte Carlo panel")
    e = sub.add_parser("estimate", parents=[common, est], help="estimate Lambda and beta from a panel CSV")
    e.add_argument("panel", help="wide panel CSV")
    m = sub.add_parser("mc", parents=[common, est, dgp], help="run a Monte Carlo experiment")
    m.add_argument("--replications", type=int)
    r = sub.add_parser("rolling", parents=[common, est, system], help="rolling-window spillovers")
    r.add_argument("--window", type=int)
    r.add_argument("--threshold", type=float, help="magnitude threshold for nonzero weights")
    sub.add_parser("irf", parents=[common, est, system], help="full-sample impulse responses")
    return p


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "mc": cmd_mc,
            "rolling": cmd_rolling, "irf": cmd_irf}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = load_config(args.config)
        return COMMANDS[args.command](args, cp)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, HarnessError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except VBSARError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
