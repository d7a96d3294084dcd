"""Command-line front end: ``simulate``, ``fit``, ``evaluate`` and ``replicate``.

Every flag can also be supplied through an environment variable named
``MSSL_<FLAG>`` (upper case, dashes replaced by underscores), e.g. ``MSSL_TOL=1e-4``
or ``MSSL_JOBS=4``. Explicit command-line flags win over the environment.

Exit status: 0 success, 2 non-convergence at the reported mode, 3 instability at
the reported mode, 4 I/O or validation errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import (FitOptions, InstabilityError, MsslError, PenaltyConfig, ValidationError,
                   read_matrix_csv, standardize, write_matrix_csv)
from .explorer import dcpe, default_ladders, dpe, sep_ssl_ssg, stabilization_report
from .simlab import SimScenario, generate, read_scenario, score_fit, simulation, table_line

log = logging.getLogger("mssl")

ENV_PREFIX = "MSSL_"
EXIT_OK, EXIT_NONCONVERGED, EXIT_UNSTABLE, EXIT_INPUT = 0, 2, 3, 4
METHODS = {"dpe": dpe, "dcpe": dcpe, "sep": sep_ssl_ssg}
METRIC_COLUMNS = ("sen", "spe", "prec", "acc", "mcc")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- small I/O helpers ---------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _read_json(path) -> dict:
    try:
        with Path(path).open() as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


# --- simulate ------------------------------------------------------------------

def resolve_scenario(args) -> SimScenario:
    if args.scenario and args.simulation:
        raise ValidationError("give either --scenario or --simulation, not both")
    if args.scenario:
        scn = read_scenario(args.scenario)
    elif args.simulation:
        scn = simulation(args.simulation)
    else:
        raise ValidationError("one of --scenario or --simulation is required")
    if args.seed is not None:
        scn.seed = int(args.seed)
    if args.fix_design:
        scn.fix_design = True
    return scn


def simulate_to_dir(scn: SimScenario, replication: int, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    _, B0, Omega0, (X, Y) = generate(scn, replication, standardized=False)
    write_matrix_csv(out / "X.csv", X)
    write_matrix_csv(out / "Y.csv", Y)
    write_matrix_csv(out / "B0.csv", B0)
    write_matrix_csv(out / "Omega0.csv", Omega0)
    manifest = {"command": "simulate", "version": __version__, "scenario": scn.to_dict(),
                "replication": replication}
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_simulate(args) -> int:
    scn = resolve_scenario(args)
    simulate_to_dir(scn, args.replication, Path(args.out))
    return EXIT_OK


# --- fit -----------------------------------------------------------------------

def options_from_args(args) -> FitOptions:
    return FitOptions(tol=args.tol, max_iter_ecm=args.max_iter, cond_cap_multiplier=args.cond_cap,
                      verbose=args.verbose)


def run_fit(method: str, X: np.ndarray, Y: np.ndarray, cfg_source: dict, opts: FitOptions,
            scale_y: bool = False):
    """Standardize, resolve penalties, explore; returns ``(data, cfg, state, grid, seconds)``."""
    data = standardize(X, Y, scale_y=scale_y)
    if "setting" in cfg_source:
        cfg = default_ladders(int(cfg_source["setting"]), data, int(cfg_source.get("L", 10)))
    else:
        cfg = PenaltyConfig.from_dict(cfg_source["penalties"])
    t0 = time.perf_counter()
    out = METHODS[method](data, cfg, opts)
    seconds = time.perf_counter() - t0
    if method == "dpe":
        grid = out
        state = grid.final_cell.state
    else:
        state, grid = out
    return data, cfg, state, grid, seconds


def _trace_rows(grid):
    rows = []
    for key, cell in grid.modes.items():
        label = ":".join(str(k) for k in key)
        tr = cell.trace
        if tr is None:
            continue
        records = getattr(tr, "records", [])
        if not records:
            rows.append([label, cell.iterations, "", "", *cell.supports])
        for r in records:
            rows.append([label, r.iteration, repr(float(r.objective)),
                         repr(float(r.max_rel_change)), r.nnz_B, r.nnz_Omega])
    return rows


def _path_report(grid) -> list:
    return [{"cell": list(key), "nnz_B": c.supports[0], "nnz_Omega": c.supports[1],
             "stable": c.stable, "converged": c.converged, "iterations": c.iterations,
             "log_posterior_terminal": c.log_posterior_at_terminal,
             "error": c.error} for key, c in grid.modes.items()]


def write_fit_outputs(out: Path, method, data, cfg, state, grid, seconds, manifest) -> int:
    out.mkdir(parents=True, exist_ok=True)
    final = grid.final_cell
    if state is None:
        _write_json(out / "manifest.json", manifest)
        raise CliError(f"no mode available at the terminal penalties: {final.error}", EXIT_UNSTABLE)
    write_matrix_csv(out / "B_hat.csv", data.coef_original_scale(state.B))
    write_matrix_csv(out / "B_hat_standardized.csv", state.B)
    write_matrix_csv(out / "Omega_hat.csv", state.Omega)
    scalars = {"theta": state.theta, "eta": state.eta, "stable": final.stable,
               "converged": final.converged, "iterations": final.iterations,
               "log_posterior": final.log_posterior_at_terminal}
    if "column_thetas" in grid.info:
        scalars["column_thetas"] = grid.info["column_thetas"]
    _write_json(out / "scalars.json", scalars)
    with (out / "trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "iteration", "objective", "max_rel_change", "nnz_B", "nnz_Omega"])
        w.writerows(_trace_rows(grid))
    report = stabilization_report(grid) if method == "dpe" else {"cells": [], "final": grid.final}
    report["path"] = _path_report(grid)
    _write_json(out / "stabilization.json", report)
    _write_json(out / "timing.json", {"seconds": seconds,
                                      "cells": {":".join(map(str, k)): c.wall_time
                                                for k, c in grid.modes.items()}})
    _write_json(out / "manifest.json", manifest)
    if not final.stable or final.error:
        raise CliError(f"terminal mode is unstable ({final.error or 'condition cap exceeded'})",
                       EXIT_UNSTABLE)
    if not final.converged:
        raise CliError("ECM did not converge at the terminal penalties", EXIT_NONCONVERGED)
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.manifest:
        man = _read_json(args.manifest)
        if man.get("command") != "fit":
            raise ValidationError("manifest was not written by 'fit'")
        method = man["method"]
        x_path, y_path = man["inputs"]["x"], man["inputs"]["y"]
        for key, path in (("x_sha256", x_path), ("y_sha256", y_path)):
            if _sha256(path) != man["inputs"][key]:
                raise ValidationError(f"{path} changed since the manifest was written")
        opts = FitOptions(**man["options"])
        cfg_source = {"penalties": man["penalties"]}
        scale_y = bool(man["scale_y"])
        setting = man.get("setting")
    else:
        method = args.method
        if method is None or not args.x or not args.y:
            raise ValidationError("fit needs a method, --x and --y (or --manifest)")
        x_path, y_path = args.x, args.y
        opts = options_from_args(args)
        if (args.setting is None) == (args.ladders is None):
            raise ValidationError("give exactly one of --setting or --ladders")
        if args.setting is not None:
            cfg_source = {"setting": args.setting, "L": args.L}
        else:
            cfg_source = {"penalties": _read_json(args.ladders)}
        scale_y = args.scale_y
        setting = args.setting
    if not args.out:
        raise ValidationError("--out is required")
    X = read_matrix_csv(x_path)
    Y = read_matrix_csv(y_path)
    data, cfg, state, grid, seconds = run_fit(method, X, Y, cfg_source, opts, scale_y)
    manifest = {
        "command": "fit", "version": __version__, "method": method, "setting": setting,
        "inputs": {"x": str(Path(x_path).resolve()), "y": str(Path(y_path).resolve()),
                   "x_sha256": _sha256(x_path), "y_sha256": _sha256(y_path)},
        "scale_y": scale_y, "penalties": cfg.to_dict(), "options": opts.to_dict(),
        "dimensions": {"n": data.n, "p": data.p, "q": data.q},
    }
    return write_fit_outputs(Path(args.out), method, data, cfg, state, grid, seconds, manifest)


# --- evaluate ------------------------------------------------------------------

def evaluate_dirs(est: Path, truth: Path):
    B_hat = read_matrix_csv(est / "B_hat.csv")
    O_hat = read_matrix_csv(est / "Omega_hat.csv")
    B0 = read_matrix_csv(truth / "B0.csv")
    O0 = read_matrix_csv(truth / "Omega0.csv")
    seconds = float("nan")
    if (est / "timing.json").exists():
        seconds = float(_read_json(est / "timing.json").get("seconds", float("nan")))
    return score_fit(B_hat, O_hat, B0, O0, time=seconds)


def format_table(rows: list[dict]) -> str:
    head = f"{'':<14s} {'SEN / SPE':<12s} {'PREC / ACC':<12s} {'MCC':<6s} {'ERR':<6s} TIME"
    lines = [head]
    for r in rows:
        for prefix, err in (("B", "MSE"), ("Omega", "FROB")):
            b = {k: r[f"{prefix}_{k}"] for k in METRIC_COLUMNS}
            b["err"] = r[err]
            b["time"] = r["TIME"]
            lines.append(table_line(f"{r['method']}:{prefix}", b, last="err"))
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    score = evaluate_dirs(Path(args.est), Path(args.truth))
    row = score.row(args.label)
    fields = list(row)
    if args.csv:
        with Path(args.csv).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerow(row)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    print(format_table([row]))
    return EXIT_OK


# --- replicate -----------------------------------------------------------------

def _one_replication(task):
    scn_dict, replication, methods, setting, L, opts_dict = task
    scn = SimScenario(**scn_dict)
    data, B0, Omega0, (X, Y) = generate(scn, replication, standardized=False)
    opts = FitOptions(**opts_dict)
    rows = []
    for method in methods:
        status = "ok"
        try:
            d, cfg, state, grid, seconds = run_fit(method, X, Y, {"setting": setting, "L": L}, opts)
            if not grid.final_cell.stable:
                status = "unstable"
            score = score_fit(d.coef_original_scale(state.B), state.Omega, B0, Omega0, seconds)
            row = score.row(method)
        except InstabilityError as exc:
            row = {"method": method}
            status = f"error: {exc}"
        row.update(replication=replication, status=status)
        rows.append(row)
    return replication, rows


def cmd_replicate(args) -> int:
    scn = resolve_scenario(args)
    methods = args.methods.split(",")
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    opts = options_from_args(args)
    tasks = [(scn.to_dict(), r, methods, args.setting, args.L, opts.to_dict())
             for r in range(args.replications)]
    results = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for rep, rows in pool.map(_one_replication, tasks):
                results[rep] = rows
    else:
        for task in tasks:
            rep, rows = _one_replication(task)
            results[rep] = rows
    rows = [row for rep in sorted(results) for row in results[rep]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("replication", "method"), k))
    with (out / "replications.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    summary = []
    for m in methods:
        sub = [r for r in rows if r["method"] == m and "B_mcc" in r]
        if not sub:
            continue
        mean = {"method": m}
        for k in sub[0]:
            if k not in ("method", "status", "replication"):
                vals = np.array([float(r[k]) for r in sub])
                mean[k] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
        summary.append(mean)
    if summary:
        with (out / "summary.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]))
            w.writeheader()
            w.writerows(summary)
        text = format_table(summary)
        (out / "summary.txt").write_text(text + "\n")
        print(text)
    _write_json(out / "manifest.json", {"command": "replicate", "version": __version__,
                                        "scenario": scn.to_dict(), "methods": methods,
                                        "setting": args.setting, "L": args.L,
                                        "replications": args.replications,
                                        "options": opts.to_dict()})
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    try:
        return cast(raw)
    except ValueError as exc:
        raise ValidationError(f"bad value for {ENV_PREFIX}{name.upper()}: {raw!r}") from exc


def _fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=_env("tol", 1e-3, float),
                   help="relative convergence tolerance (default 1e-3)")
    p.add_argument("--max-iter", type=int, default=_env("max_iter", 500, int),
                   help="maximum ECM iterations per grid cell (default 500)")
    p.add_argument("--cond-cap", type=float, default=_env("cond_cap", 10.0, float),
                   help="stability cap multiplier: cond(S) <= cap * n (default 10)")
    p.add_argument("--setting", type=int, default=_env("setting", None, int),
                   help="preset hyper-parameter setting 1..12")
    p.add_argument("--L", type=int, default=_env("L", 10, int), help="ladder length (default 10)")
    p.add_argument("--verbose", action="store_true", default=_env("verbose", False, bool))


def _scenario_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default=_env("scenario", None), help="INI scenario file")
    p.add_argument("--simulation", type=int, default=_env("simulation", None, int),
                   choices=range(1, 9), help="built-in simulation design 1..8")
    p.add_argument("--seed", type=int, default=_env("seed", None, int))
    p.add_argument("--fix-design", action="store_true", default=_env("fix_design", False, bool),
                   help="keep X fixed across replications")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mssl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one replication of a simulation design")
    _scenario_options(p)
    p.add_argument("--replication", type=int, default=_env("replication", 0, int))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit B and Omega by dpe, dcpe or sep")
    p.add_argument("method", nargs="?", choices=sorted(METHODS))
    p.add_argument("--x", default=_env("x", None))
    p.add_argument("--y", default=_env("y", None))
    p.add_argument("--ladders", default=_env("ladders", None),
                   help="JSON file with lambda1, xi1, lambda_ladder, xi_ladder, a/b_theta, a/b_eta")
    p.add_argument("--scale-y", action="store_true", default=_env("scale_y", False, bool),
                   help="scale Y columns to unit variance as well as centering them")
    p.add_argument("--manifest", default=None, help="re-run exactly from a fit manifest")
    p.add_argument("--out", default=_env("out", None))
    _fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score estimates against the truth")
    p.add_argument("--est", required=True, help="directory with B_hat.csv and Omega_hat.csv")
    p.add_argument("--truth", required=True, help="directory with B0.csv and Omega0.csv")
    p.add_argument("--csv", default=None, help="write the metrics row here instead of stdout")
    p.add_argument("--label", default="mSSL")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replicate", help="simulate + fit + evaluate over many replications")
    _scenario_options(p)
    _fit_options(p)
    p.add_argument("--methods", default=_env("methods", "dpe,dcpe,sep"))
    p.add_argument("--replications", type=int, default=_env("replications", 10, int))
    p.add_argument("--jobs", type=int, default=_env("jobs", 1, int))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if getattr(args, "verbose", False):
            logging.getLogger("mssl").setLevel(logging.INFO)
        if args.command == "replicate" and args.setting is None:
            args.setting = 1
        return args.func(args)
    except CliError as exc:
        print(f"mssl: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, OSError) as exc:
        print(f"mssl: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InstabilityError as exc:
        print(f"mssl: unstable: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except MsslError as exc:
        print(f"mssl: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
