"""Command-line entry point: run scenarios, sweeps, and the pixel study.

Exit codes: 0 on success, 1 on configuration errors, 2 when a module
invariant is breached during a run.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import os
import sys

import numpy as np

from .analysis import perturbation_analysis
from .config import ConfigError, load_config, parse_config, set_by_path
from .runner import InvariantBreach, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def _load_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc


def _cmd_run(args):
    doc = _load_json(args.config, "config")
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = parse_config(doc)
    result = run_scenario(cfg, out_dir=args.out)
    brief = {k: result.summary[k]
             for k in ("name", "seed", "converged", "convergence_time_s",
                       "rmse_pos_m", "rmse_ori_deg", "association_rate_hz",
                       "mean_matches_per_frame")}
    print(json.dumps(brief, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args):
    base = _load_json(args.config, "config")
    grid = _load_json(args.grid, "grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid must be a non-empty object of "
                          "dotted-path: value-list entries")
    keys = sorted(grid)
    for key in keys:
        if not isinstance(grid[key], list) or not grid[key]:
            raise ConfigError(f"grid entry {key} must be a non-empty list")
    cells = []
    for idx, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        doc = copy.deepcopy(base)
        for key, value in zip(keys, values):
            set_by_path(doc, key, value)
        cfg = parse_config(doc)
        cell_dir = os.path.join(args.out, f"cell_{idx:03d}")
        result = run_scenario(cfg, out_dir=cell_dir)
        cells.append({
            "cell": idx,
            "params": dict(zip(keys, values)),
            "converged": result.summary["converged"],
            "convergence_time_s": result.summary["convergence_time_s"],
            "rmse_pos_m": result.summary["rmse_pos_m"],
            "rmse_ori_deg": result.summary["rmse_ori_deg"],
        })
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cells, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(cells, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_perturb(args):
    doc = _load_json(args.config, "config")
    unknown = sorted(set(doc) - {"features", "sigma", "trials", "seed"})
    if unknown:
        raise ConfigError(f"perturb config: unknown key(s) "
                          f"{', '.join(unknown)}")
    features = doc.get("features")
    if features is None:
        raise ConfigError("perturb config needs a 'features' list of "
                          "camera-frame [x, y, z] points")
    sigma = float(doc.get("sigma", 5.0 / 320.0))
    trials = int(doc.get("trials", 1000))
    seed = int(doc.get("seed", 0))
    try:
        stats = perturbation_analysis(features, sigma, trials,
                                      np.random.default_rng(seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "perturbation.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(out + "\n")
    print(out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="relstereo",
        description="Two-vehicle collaborative stereo simulator: scenario "
                    "runs, parameter sweeps, and the pixel-perturbation "
                    "study.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="cartesian parameter sweep")
    p_sweep.add_argument("--config", required=True, help="base scenario JSON")
    p_sweep.add_argument("--grid", required=True,
                         help="JSON object of dotted-path: value-list")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_pert = sub.add_parser("perturb",
                            help="least-squares pixel-perturbation study")
    p_pert.add_argument("--config", required=True,
                        help="JSON with features, sigma, trials, seed")
    p_pert.add_argument("--out", default=None,
                        help="optional output directory")
    p_pert.set_defaults(func=_cmd_perturb)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
