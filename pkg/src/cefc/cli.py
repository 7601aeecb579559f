"""Command-line entry point.

Subcommands: gen-data, fit, predict, control, prop1, bench.  Every command
takes `--config <path>` pointing at one JSON document whose sections mirror
the package types; all randomness derives from the config seed.  File
formats are documented in docs/formats.md.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import koopman
from .controller import ControlLimits, LqrWeights, StabilizabilityError, coordinate
from .gridsim import GridModel, Scenario, SimulationError, default_grid, simulate
from .koopman import Dataset, KoopmanModel, fit, generate_dataset, method_config
from .robustness import FeederSpec, check_prop1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "seed" not in cfg:
        raise ConfigError("config must provide a seed")
    return cfg


def _grid_from_config(cfg) -> GridModel:
    section = cfg.get("grid")
    if section is None:
        return default_grid()
    if isinstance(section, str):
        with open(section) as fh:
            section = json.load(fh)
    return GridModel.from_dict(section)


def _scenario_from_config(cfg) -> Scenario:
    section = cfg.get("scenario")
    if section is None:
        raise ConfigError("config must provide a scenario section for this command")
    if isinstance(section, str):
        with open(section) as fh:
            section = json.load(fh)
    return Scenario.from_dict(section)


def _limits_from_config(cfg, grid) -> ControlLimits:
    section = cfg.get("limits", {})
    return ControlLimits.for_grid(grid, **section)


def _weights_from_config(cfg, model) -> LqrWeights:
    section = cfg.get("weights", {})
    return LqrWeights.for_model(model, **section)


def _outdir(cfg) -> str:
    out = cfg.get("output_dir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(cfg, args) -> int:
    grid = _grid_from_config(cfg)
    ds = generate_dataset(grid, args.train, args.test, cfg["seed"])
    outdir = _outdir(cfg)
    ds.save(os.path.join(outdir, "dataset"))
    print(f"wrote {args.train} train + {args.test} test trajectories to {outdir}/dataset")
    return EXIT_OK


def cmd_fit(cfg, args) -> int:
    outdir = _outdir(cfg)
    ds = Dataset.load(os.path.join(outdir, "dataset"))
    obs = cfg.get("observables")
    config = (
        koopman.ObservableConfig.from_dict(obs)
        if obs is not None
        else method_config(args.method, dt=ds.train[0].dt)
    )
    model = fit(ds, config, ridge=cfg.get("ridge", 1e-8))
    path = args.model or os.path.join(outdir, f"model_{args.method}.json")
    model.save(path)
    print(f"fitted {args.method} model (dim {model.dim}) -> {path}")
    return EXIT_OK


def cmd_predict(cfg, args) -> int:
    grid = _grid_from_config(cfg)
    scenario = _scenario_from_config(cfg)
    model = KoopmanModel.load(args.model)
    outdir = _outdir(cfg)
    rec = simulate(grid, scenario)
    k0 = koopman._prediction_start(rec, model.config)
    steps = len(rec) - 1 - k0
    w = model.config.window_len
    om_hat = koopman.predict_rollout(
        model,
        rec.omega[k0 - w + 1 : k0 + 1],
        rec.y[k0 - w + 1 : k0 + 1],
        rec.ul[k0:-1],
        rec.ud[k0:-1],
        steps,
    )
    path = os.path.join(outdir, "prediction.csv")
    import csv as _csv

    with open(path, "w", newline="") as fh:
        wtr = _csv.writer(fh)
        wtr.writerow(["t", "omega_true", "omega_pred"])
        for i in range(steps + 1):
            wtr.writerow(
                [f"{rec.t[k0 + i]:.12g}", f"{rec.omega[k0 + i]:.12g}", f"{om_hat[i]:.12g}"]
            )
    print(f"wrote prediction to {path}")
    return EXIT_OK


def cmd_control(cfg, args) -> int:
    grid = _grid_from_config(cfg)
    scenario = _scenario_from_config(cfg)
    model = KoopmanModel.load(args.model)
    limits = _limits_from_config(cfg, grid)
    weights = _weights_from_config(cfg, model)
    trace = coordinate(grid, scenario, model, limits, weights)
    outdir = _outdir(cfg)
    trace.record.write_csv(os.path.join(outdir, "control_trace.csv"))
    with open(os.path.join(outdir, "control_summary.json"), "w") as fh:
        json.dump(trace.summary(grid.base_frequency), fh, indent=2)
    print(json.dumps(trace.summary(grid.base_frequency), indent=2))
    return EXIT_OK


def cmd_prop1(cfg, args) -> int:
    grid = _grid_from_config(cfg)
    scenario = _scenario_from_config(cfg)
    learned = KoopmanModel.load(args.model)
    oracle = KoopmanModel.load(args.oracle) if args.oracle else learned
    limits = _limits_from_config(cfg, grid)
    feeders = FeederSpec.uniform(args.feeders, args.quantum, grid.n_loads)
    report = check_prop1(learned, oracle, grid, scenario, feeders, limits)
    outdir = _outdir(cfg)
    path = os.path.join(outdir, "prop1_report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(
        f"k_star={report.k_star} i_star={report.i_star} "
        f"brute_force={report.brute_force_mode} holds={report.holds} -> {path}"
    )
    return EXIT_OK


def cmd_bench(cfg, args) -> int:
    grid = _grid_from_config(cfg)
    suite = bench_mod.BenchSuite(
        grid=grid,
        n_train=args.train,
        n_test=args.test,
        seed=cfg["seed"],
        outdir=_outdir(cfg),
        limits=_limits_from_config(cfg, grid),
    )
    dataset = generate_dataset(grid, suite.n_train, suite.n_test, suite.seed)
    table = bench_mod.run_prediction_table(suite, dataset)
    model = fit(dataset, method_config("cefc", dt=dataset.train[0].dt), ridge=suite.ridge)
    weights = _weights_from_config(cfg, model)
    bench_mod.run_control_subcases(suite, model, weights)
    bench_mod.run_edcps_comparison(suite, model, weights)
    for name, m in table.items():
        print(f"{name:9s} nadir {m['nadir_hz']:.3f} Hz  ssv {m['ssv_hz']:.3f} Hz  mean {m['mean_hz']:.3f} Hz")
    print(f"outputs in {suite.outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cefc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **extra):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data)
    p.add_argument("--train", type=int, default=300)
    p.add_argument("--test", type=int, default=200)

    p = add("fit", cmd_fit)
    p.add_argument("--method", choices=["cefc", "cefc-ntd", "edmd", "dmd"], default="cefc")
    p.add_argument("--model", default=None)

    p = add("predict", cmd_predict)
    p.add_argument("--model", required=True)

    p = add("control", cmd_control)
    p.add_argument("--model", required=True)

    p = add("prop1", cmd_prop1)
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--feeders", type=int, default=3)
    p.add_argument("--quantum", type=float, default=40.0)

    p = add("bench", cmd_bench)
    p.add_argument("--train", type=int, default=300)
    p.add_argument("--test", type=int, default=200)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(cfg, args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, StabilizabilityError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
