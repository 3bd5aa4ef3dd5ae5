"""``narrowbeam`` command line: simulate, compare, sweep, verify, distance.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (a
``failure.json`` diagnostic is written to the output directory).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from .errors import ConfigError, InsufficientPoints, NarrowBeamError, SourceSupportError
from .fokker_planck_mc import cloud_header, read_cloud, write_cloud_binary, write_cloud_csv
from .harness import (
    CSV_COLUMNS, ExperimentConfig, ballistic_cloud, mc_cloud, pencil_cloud, run_comparison, scaling_fit,
)
from .ballistic import default_ray_step
from .wasserstein import bl_distance_binned

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=1)
        fh.write("\n")


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _write_table(out_dir, stem, fmt, rows, extra=None):
    if fmt == "csv":
        path = os.path.join(out_dir, stem + ".csv")
        with open(path, "w") as fh:
            fh.write(_csv_text(rows))
    else:
        path = os.path.join(out_dir, stem + ".json")
        _dump_json(path, {"columns": list(CSV_COLUMNS), "rows": rows, **(extra or {})})
    return path


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    over = {}
    if args.dim is not None:
        over["dim"] = args.dim
        src = cfg.source.as_dict()
        # a default on-axis source follows the dimension change
        if all(not any(a["anchor"]) and not any(a["V0"]) for a in src["atoms"]):
            over["source"] = {"atoms": [{"anchor": [0.0] * (args.dim - 1), "V0": [0.0] * (args.dim - 1),
                                         "weight": a["weight"]} for a in src["atoms"]]}
    if args.particles is not None:
        over["monte_carlo.n_particles"] = args.particles
    if args.seed is not None:
        over["seed"] = args.seed
    if args.format is not None:
        over["outputs.format"] = args.format
    if args.out is not None:
        over["outputs.dir"] = args.out
    if args.epsilon is not None:
        over["epsilon_list"] = [args.epsilon]
    if args.kappa is not None:
        over["kappa_rule"] = {"rule": "fixed", "value": args.kappa}
    if over:
        cfg = cfg.replace(**over)
    return cfg


def _log(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr)


def _record_row(rec, timing: bool) -> dict:
    row = rec.row()
    if not timing:
        row["wall_time_s"] = float("nan")
    return row


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    eps = cfg.epsilon_list[0]
    if args.model == "fp":
        cloud, diag = mc_cloud(cfg, eps, args.replicate)
        header = cloud_header(cfg.sim_config(eps, args.replicate), {"model": "fp", "diagnostics_run": diag.as_dict()})
    elif args.model == "pencil":
        cloud = pencil_cloud(cfg, eps)
        header = {"model": "pencil", "epsilon": eps, "seed": cfg.seed}
    else:
        _, lam = cfg.fields()
        dt = cfg.ray_dt if cfg.ray_dt is not None else (default_ray_step(eps) if eps > 0 else cfg.mc.dt)
        cloud = ballistic_cloud(cfg.source.atoms(eps), lam, dt, cfg.mc.t_max)
        header = {"model": "ballistic", "epsilon": eps, "seed": cfg.seed}
    header["config"] = cfg.to_dict()
    stem = os.path.join(cfg.out_dir, f"cloud_{args.model}_eps{eps:g}")
    if args.cloud_format == "csv":
        path = stem + ".csv"
        write_cloud_csv(path, cloud, header)
    else:
        path = stem + ".nbc"
        write_cloud_binary(path, cloud, header)
    summary = {"path": os.path.basename(path), "n_atoms": len(cloud), "mass": cloud.mass,
               "diagnostics": cloud.diagnostics}
    _dump_json(stem + ".summary.json", summary)
    print(path)
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    eps = cfg.epsilon_list[0]
    rec = run_comparison(cfg, eps, log=_log(args))
    row = _record_row(rec, args.timing)
    path = _write_table(cfg.out_dir, "compare", cfg.out_format, [row])
    _dump_json(os.path.join(cfg.out_dir, "compare_diagnostics.json"),
               {"config": cfg.to_dict(), "diagnostics": rec.diagnostics})
    print(path)
    return EXIT_OK


def _fit_or_none(eps, vals, buds):
    try:
        return scaling_fit(eps, vals, buds), None
    except InsufficientPoints as exc:
        return None, str(exc)


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    rows, recs = [], []
    for eps in cfg.epsilon_list:
        rec = run_comparison(cfg, eps, log=_log(args))
        recs.append(rec)
        rows.append(_record_row(rec, args.timing))
        # flush after every point so a later failure keeps the finished rows
        _write_table(cfg.out_dir, "sweep", cfg.out_format, rows)
    eps = [r.epsilon for r in recs]
    fits, status = {}, {}
    fit_row = {c: float("nan") for c in CSV_COLUMNS}
    fit_row["epsilon"] = "fit"
    fit_row["kappa"] = f"{cfg.kappa_rule.rule}:{cfg.kappa_rule.value:g}"
    fit_row["n_particles"] = cfg.mc.n_particles
    fit_row["seed"] = cfg.seed
    for name in ("W_uv", "W_uufrak", "W_vufrak"):
        fit, why = _fit_or_none(eps, [getattr(r, name) for r in recs], [getattr(r, name + "_budget") for r in recs])
        fits[name] = fit.as_dict() if fit else None
        status[name] = "ok" if fit else why
        if fit:
            # the fit row carries slope and the half width of its interval
            fit_row[name] = fit.slope
            fit_row[name + "_budget"] = 0.5 * (fit.slope_ci[1] - fit.slope_ci[0])
    rows.append(fit_row)
    path = _write_table(cfg.out_dir, "sweep", cfg.out_format, rows, {"fits": fits, "fit_status": status})
    _dump_json(os.path.join(cfg.out_dir, "sweep_fit.json"), {"fits": fits, "fit_status": status,
                                                             "config": cfg.to_dict()})
    _dump_json(os.path.join(cfg.out_dir, "sweep_diagnostics.json"),
               {"points": [{"epsilon": r.epsilon, "diagnostics": r.diagnostics} for r in recs]})
    print(path)
    return EXIT_OK


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    from .verify import run_checks

    results = run_checks(log=_log(args))
    _dump_json(os.path.join(cfg.out_dir, "verify.json"), {"checks": results})
    failed = [r for r in results if not r["passed"]]
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['detail']}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_distance(args, cfg: ExperimentConfig) -> int:
    a, head_a = read_cloud(args.cloud_a)
    b, head_b = read_cloud(args.cloud_b)
    if a.dim != b.dim:
        raise ConfigError("clouds have different dimensions")
    eps = cfg.epsilon_list[0]
    kappa = cfg.kappa_rule.kappa(eps)
    grid = cfg.grid.grid(eps, a.dim, cfg.anchor() if a.dim == cfg.dim else None)
    res = bl_distance_binned(a, b, kappa, grid)
    payload = {"value": res.value, "budget": res.budget, "binning_term": res.binning_term,
               "boundary_term": res.boundary_term, "gap": res.gap, "n_support": res.n_support,
               "kappa": kappa, "epsilon": eps, "cloud_a": os.path.basename(args.cloud_a),
               "cloud_b": os.path.basename(args.cloud_b)}
    if cfg.out_format == "json":
        path = os.path.join(cfg.out_dir, "distance.json")
        _dump_json(path, payload)
    else:
        path = os.path.join(cfg.out_dir, "distance.csv")
        keys = sorted(payload)
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n" + ",".join(_fmt(payload[k]) for k in keys) + "\n")
    print(f"{res.value!r} +- {res.budget!r}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare, "sweep": cmd_sweep, "verify": cmd_verify,
            "distance": cmd_distance}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--epsilon", type=float)
    common.add_argument("--kappa", type=float, help="fixed kappa, overrides the config rule")
    common.add_argument("--dim", type=int)
    common.add_argument("--particles", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--timing", action="store_true", help="write measured wall time (outputs become run dependent)")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="narrowbeam", description="Narrow-beam transport comparisons")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="one model at one epsilon, write its cloud")
    s.add_argument("--model", choices=("fp", "pencil", "ballistic"), default="fp")
    s.add_argument("--replicate", type=int, default=0, help="Monte Carlo replicate index")
    s.add_argument("--cloud-format", choices=("binary", "csv"), default="binary")
    sub.add_parser("compare", parents=[common], help="three pairwise distances at one epsilon")
    sub.add_parser("sweep", parents=[common], help="compare over epsilon_list and fit slopes")
    sub.add_parser("verify", parents=[common], help="run the built-in invariant checks")
    d = sub.add_parser("distance", parents=[common], help="binned distance between two stored clouds")
    d.add_argument("cloud_a")
    d.add_argument("cloud_b")
    return p


def _write_failure(out_dir, exc: BaseException, command: str):
    info = {"command": command, "error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exc()}
    for attr in ("residual", "values"):
        if getattr(exc, attr, None) is not None:
            info[attr] = getattr(exc, attr)
    try:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "failure.json")
        _dump_json(path, info)
        return path
    except OSError:
        return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
    except (ConfigError, SourceSupportError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, cfg)
    except (ConfigError, SourceSupportError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NarrowBeamError, ArithmeticError, np.linalg.LinAlgError) as exc:
        path = _write_failure(cfg.out_dir, exc, args.command)
        print(f"numerical failure: {type(exc).__name__}: {exc}" + (f" (see {path})" if path else ""), file=sys.stderr)
        return EXIT_NUMERIC
    if not args.quiet:
        print(f"{args.command} finished in {time.perf_counter() - start:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
