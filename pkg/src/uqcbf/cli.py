"""Command-line entry point.

Commands: bench1d, shrinkage, sensitivity, simulate, sweep.  Every run
writes its artifacts plus a manifest (command, config digest, seed,
timestamps, artifact paths, version) into the output directory.  All
randomness flows from the single --seed flag; repeating a command with the
same manifest reproduces byte-identical non-timing outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench1d import Bench1dConfig, run_sweep, shrinkage_study, sweep_csv
from .estimators import ESTIMATORS, fit_estimator
from .metrics import sensitivity as sensitivity_metric
from .nncore import TrainConfig
from .sim import (SIM_ESTIMATORS, SimConfig, error_rate_sweep, run_episode,
                  save_sweep_csv, save_trajectory_csv, sweep_table)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    pass


# keys shared by the bench-style commands, mapped onto the two config objects
_BENCH_KEYS = {
    "n_train": 513, "n_test": 1000,
    "train_intervals": [[-2.5, -0.75], [0.75, 2.5]],
    "test_domain": [-3.0, 3.0], "noise_half_width": 0.5,
    "epochs": 1000, "learning_rate": 1e-4, "batch_size": 20,
}

_SIM_KEYS = {
    "dt": 0.05, "u_min": [-1.0, -2.0], "u_max": [1.0, 2.0],
    "checkpoints": None, "checkpoint_radius": 0.3,
    "buffer_capacity": 10_000, "train_every": 20, "train_epochs": 10,
    "epsilon": 0.1, "p_k": 0.9, "episode_steps": 400,
    "start_pose": [2.0, 0.0, 1.5707963267948966],
    "actuation_gains": [0.9, 1.1], "look_ahead": 0.1, "zeta": 0.01,
    "goal_weight": 5.0, "active_margin": 0.2, "learn_rate": 3e-3,
    "hidden_layers": 2, "hidden_units": 16, "ensemble_size": 5,
}

SCHEMAS = {
    "bench1d": {**_BENCH_KEYS, "estimators": sorted(ESTIMATORS)},
    "shrinkage": {**_BENCH_KEYS, "estimators": ["ensemble", "deup", "dadee"],
                  "factors": [1, 2, 4, 8]},
    "sensitivity": {**_BENCH_KEYS, "estimators": ["mc_dropout", "mc_dropf"],
                    "n_seeds": 5},
    "simulate": {**_SIM_KEYS, "estimator": "dadee", "p": 0.9, "runs": 20},
    "sweep": {**_SIM_KEYS,
              "estimators": ["baseline", "mc_dropout", "anchored", "deup", "dadee"],
              "p_values": [0.5, 0.6, 0.7, 0.8, 0.9], "n_runs": 20},
}


def parse_config(path: str | Path | None, command: str) -> dict:
    """Defaults overlaid with the JSON file; unknown keys are fatal."""
    schema = SCHEMAS[command]
    merged = json.loads(json.dumps(schema))  # deep copy
    if path is None:
        return merged
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"malformed config {path}: {err.msg} at line {err.lineno} "
            f"column {err.colno}") from err
    if not isinstance(user, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    for key in user:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {command}")
    merged.update(user)
    return merged


def serialize_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, indent=2) + "\n"


def config_digest(command: str, config: dict, seed: int) -> str:
    blob = json.dumps({"command": command, "config": config, "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    started_at: float
    finished_at: float
    artifacts: list
    version: str = __version__

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True,
                                   indent=2) + "\n")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _bench_configs(cfg: dict, seed: int) -> tuple[Bench1dConfig, TrainConfig]:
    bench = Bench1dConfig(n_train=cfg["n_train"], n_test=cfg["n_test"],
                          train_intervals=_tuplify(cfg["train_intervals"]),
                          test_domain=_tuplify(cfg["test_domain"]),
                          noise_half_width=cfg["noise_half_width"], seed=seed)
    train = TrainConfig(epochs=cfg["epochs"], learning_rate=cfg["learning_rate"],
                        batch_size=cfg["batch_size"], seed=seed)
    return bench, train


def _sim_config(cfg: dict, seed: int) -> SimConfig:
    kwargs = {k: _tuplify(cfg[k]) for k in _SIM_KEYS if cfg.get(k) is not None
              and k != "checkpoints"}
    if cfg.get("checkpoints") is not None:
        kwargs["checkpoints"] = _tuplify(cfg["checkpoints"])
    return SimConfig(seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# command bodies; each returns a list of artifact paths


def _cmd_bench1d(cfg: dict, seed: int, out: Path, jobs: int,
                 plots_dir: str | None = None) -> list[Path]:
    from .bench1d import generate, prediction_curves
    from .metrics import report as metric_report
    bench, train = _bench_configs(cfg, seed)
    train_data, test = generate(bench)
    rows = []
    artifacts = []
    pdir = None
    if plots_dir is not None:
        pdir = Path(plots_dir)
        pdir.mkdir(parents=True, exist_ok=True)
    for name in cfg["estimators"]:
        holder = {}

        def fit(data, n=name, h=holder):
            h["predictor"] = fit_estimator(n, data, train)
            return h["predictor"]

        try:
            rows.append(metric_report(name, fit, train_data, test, seed=seed))
        except Exception as err:
            rows.append({"estimator": name,
                         "error": f"{type(err).__name__}: {err}"})
            continue
        if pdir is not None:
            ppath = pdir / f"{name}.csv"
            with open(ppath, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "mean", "variance", "region"])
                for x, m, v, r in prediction_curves(holder["predictor"], bench):
                    writer.writerow([repr(x), repr(m), repr(v), r])
            artifacts.append(ppath)
    path = out / "bench1d.csv"
    path.write_text(sweep_csv(rows))
    return [path] + artifacts


def _cmd_shrinkage(cfg: dict, seed: int, out: Path, jobs: int) -> list[Path]:
    bench, train = _bench_configs(cfg, seed)
    path = out / "shrinkage.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "factor", "mean_in_domain_variance"])
        for name in cfg["estimators"]:
            for factor, var in shrinkage_study(bench, name, train,
                                               factors=tuple(cfg["factors"])):
                writer.writerow([name, factor, repr(var)])
    return [path]


def _cmd_sensitivity(cfg: dict, seed: int, out: Path, jobs: int) -> list[Path]:
    bench, _ = _bench_configs(cfg, seed)
    from .bench1d import generate
    path = out / "sensitivity.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "seed", "sensitivity"])
        for k in range(cfg["n_seeds"]):
            run_seed = seed + k
            b = replace(bench, seed=run_seed)
            train = TrainConfig(epochs=cfg["epochs"],
                                learning_rate=cfg["learning_rate"],
                                batch_size=cfg["batch_size"], seed=run_seed)
            data, split = generate(b)
            for name in cfg["estimators"]:
                predictor = fit_estimator(name, data, train)
                value = sensitivity_metric(predictor, split.inputs)
                writer.writerow([name, run_seed, repr(value)])
    return [path]


def _cmd_simulate(cfg: dict, seed: int, out: Path, jobs: int,
                  traj_dir: str | None = None) -> list[Path]:
    sim = _sim_config(cfg, seed)
    estimator = cfg["estimator"]
    if estimator not in SIM_ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; "
                          f"choose from {', '.join(SIM_ESTIMATORS)}")
    rows = error_rate_sweep(sim, estimators=(estimator,),
                            p_values=(cfg["p"],), n_runs=cfg["runs"])
    path = out / "table2.csv"
    save_sweep_csv(rows, path)
    artifacts = [path]
    if traj_dir is not None:
        tdir = Path(traj_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        sim_p = replace(sim, p_k=cfg["p"])
        for row in rows:
            rep = run_episode(sim_p, estimator, seed=row["seed"])
            tpath = tdir / f"traj_{estimator}_run{row['run']}.csv"
            save_trajectory_csv(rep, tpath)
            artifacts.append(tpath)
    return artifacts


def _sweep_cell(args):
    cfg_dict, seed, estimator, p, run, cell_seed = args
    sim = replace(_sim_config(cfg_dict, seed), p_k=p)
    rep = run_episode(sim, estimator, seed=cell_seed)
    return {"estimator": estimator, "p": p, "run": run, "seed": cell_seed,
            "error_rate": rep.error_rate, "violations": rep.violations,
            "steps_cbc_active": rep.steps_cbc_active,
            "infeasible_events": rep.infeasible_events}


def _cmd_sweep(cfg: dict, seed: int, out: Path, jobs: int) -> list[Path]:
    sim = _sim_config(cfg, seed)
    estimators = tuple(cfg["estimators"])
    p_values = tuple(cfg["p_values"])
    n_runs = cfg["n_runs"]
    if jobs <= 1:
        rows = error_rate_sweep(sim, estimators=estimators,
                                p_values=p_values, n_runs=n_runs)
    else:
        root = np.random.SeedSequence(seed)
        seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n_runs)]
        cells = []
        for estimator in estimators:
            # baseline ignores p: run once, replicate across the grid below
            ps = p_values[:1] if estimator == "baseline" else p_values
            for p in ps:
                for run, cell_seed in enumerate(seeds):
                    cells.append((cfg, seed, estimator, p, run, cell_seed))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
        extra = []
        for row in rows:
            if row["estimator"] == "baseline":
                for p in p_values[1:]:
                    extra.append({**row, "p": p})
        rows.extend(extra)
        rows.sort(key=lambda r: (estimators.index(r["estimator"]), r["p"], r["run"]))
    path = out / "sweep.csv"
    save_sweep_csv(rows, path)
    means = out / "sweep_means.csv"
    with open(means, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "p", "mean_error_rate"])
        for (estimator, p), value in sorted(sweep_table(rows).items()):
            writer.writerow([estimator, p, repr(value)])
    return [path, means]


COMMANDS = {
    "bench1d": _cmd_bench1d,
    "shrinkage": _cmd_shrinkage,
    "sensitivity": _cmd_sensitivity,
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqcbf",
        description="Uncertainty-aware learning and safe-control experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=str, default=".")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--config", type=str, default=None,
                        help="JSON config; defaults are the schema values "
                             "shown in the README")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "simulate":
            p.add_argument("--estimator", type=str, default=None)
            p.add_argument("--p", type=float, default=None)
            p.add_argument("--runs", type=int, default=None)
            p.add_argument("--traj", type=str, default=None)
        if name == "bench1d":
            p.add_argument("--plots", type=str, default=None)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config, args.command)
        if args.command == "simulate":
            for key in ("estimator", "p", "runs"):
                value = getattr(args, key)
                if value is not None:
                    cfg[key] = value
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        if args.command == "simulate":
            artifacts = _cmd_simulate(cfg, args.seed, out, args.jobs,
                                      traj_dir=args.traj)
        elif args.command == "bench1d":
            artifacts = _cmd_bench1d(cfg, args.seed, out, args.jobs,
                                     plots_dir=args.plots)
        else:
            artifacts = COMMANDS[args.command](cfg, args.seed, out, args.jobs)
        manifest = RunManifest(
            command=args.command,
            config_digest=config_digest(args.command, cfg, args.seed),
            seed=args.seed,
            started_at=started,
            finished_at=time.time(),
            artifacts=[str(a) for a in artifacts])
        manifest.save(out / "manifest.json")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
