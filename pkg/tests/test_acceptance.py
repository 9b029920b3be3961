"""Acceptance suite: ten headline checks with stated runtime budgets.

Each test prints a single PASS line with its wall time when it succeeds,
so a verbose run reads as a checklist.  The long benchmark and simulator
criteria reuse the deterministic seeding of the library entry points, so
repeated runs reproduce the same numbers.
"""

import json
import time

import numpy as np
import pytest
from scipy.special import ndtri

from uqcbf import nncore
from uqcbf.barriers import risk_multiplier
from uqcbf.bench1d import Bench1dConfig, run_sweep, shrinkage_study, generate
from uqcbf.cli import dispatch
from uqcbf.estimators import fit_estimator
from uqcbf.gp import RbfKernel, fit_gp, predict_gp
from uqcbf.metrics import MetricReport, sensitivity
from uqcbf.nncore import Dataset, NetworkSpec, TrainConfig
from uqcbf.sim import SimConfig, error_rate_sweep, run_episode, sweep_table
from uqcbf.socp import solve

from conftest import grid_oracle, make_random_program


class _Budget:
    def __init__(self, name, seconds):
        self.name, self.seconds = name, seconds

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, exc_type, *_):
        elapsed = time.monotonic() - self.t0
        if exc_type is None:
            print(f"ACCEPTANCE {self.name}: PASS ({elapsed:.1f}s "
                  f"of {self.seconds:.0f}s budget)")
            assert elapsed < self.seconds, f"{self.name} exceeded runtime budget"
        else:
            print(f"ACCEPTANCE {self.name}: FAIL after {elapsed:.1f}s")
        return False


def test_01_gp_oracle_equivalence():
    with _Budget("01 gp-vs-dense-inverse", 5):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(2, 11))
            x = rng.normal(size=(n, int(rng.integers(1, 3))))
            y = rng.normal(size=(n, 1))
            kernel = RbfKernel(float(rng.uniform(0.2, 2.0)),
                               float(rng.uniform(0.3, 1.5)),
                               float(rng.uniform(0.05, 0.5)))
            model = fit_gp(x, y, kernel)
            xq = rng.normal(size=(4, x.shape[1]))
            mean, var = predict_gp(model, xq)
            k = kernel(x, x) + kernel.noise_var * np.eye(n)
            k_inv = np.linalg.inv(k)
            ks = kernel(xq, x)
            mean_o = ks @ k_inv @ y
            var_o = kernel.signal_var - np.einsum("ij,jk,ik->i", ks, k_inv, ks)
            assert np.max(np.abs(mean - mean_o)) < 1e-8
            assert np.max(np.abs(var[:, 0] - np.maximum(var_o, 0))) < 1e-8


def test_02_gradient_suite():
    with _Budget("02 analytic-gradients", 10):
        rng = np.random.default_rng(7)
        for case in range(50):
            loss = ("mse", "mllv_nll", "anchored_mse")[case % 3]
            d_in = int(rng.integers(1, 4))
            d_t = int(rng.integers(1, 3))
            d_out = 2 * d_t if loss == "mllv_nll" else d_t
            spec = NetworkSpec(d_in, d_out, int(rng.integers(1, 3)),
                               int(rng.integers(2, 6)))
            params = nncore.init_params(spec, rng)
            params.values += 0.1 * rng.standard_normal(len(params.values))
            x = rng.normal(size=(5, d_in))
            y = rng.normal(size=(5, d_t))
            kwargs = {}
            if loss == "anchored_mse":
                anchor = nncore.init_params(spec, rng)
                kwargs = {"anchor": anchor, "anchor_weight": 2.5, "n_data": 20}
            grad, _ = nncore.backward(params, spec, x, y, loss, **kwargs)
            idx = rng.choice(len(grad), size=min(12, len(grad)), replace=False)
            eps = 1e-6
            for k in idx:
                pp = params.copy(); pp.values[k] += eps
                pm = params.copy(); pm.values[k] -= eps
                _, lo_hi = nncore.backward(pp, spec, x, y, loss, **kwargs)
                _, lo_lo = nncore.backward(pm, spec, x, y, loss, **kwargs)
                fd = (lo_hi - lo_lo) / (2 * eps)
                denom = max(abs(fd), abs(grad[k]), 1e-8)
                assert abs(fd - grad[k]) / denom < 1e-4


def test_03_cone_solver_oracle():
    with _Budget("03 solver-vs-grid-oracle", 60):
        rng = np.random.default_rng(123)
        n_infeasible = 0
        for i in range(200):
            force = "infeasible" if i % 5 == 4 else "any"
            program = make_random_program(rng, force=force)
            oracle_obj, _ = grid_oracle(program, n=401)
            result = solve(program)
            if oracle_obj is None:
                n_infeasible += 1
                assert result.status == "infeasible", \
                    f"program {i}: solver optimal on oracle-infeasible instance"
            else:
                assert result.status == "optimal"
                assert program.min_margin(result.u) >= -1e-6
                assert result.objective <= oracle_obj + 1e-3 * (1 + abs(oracle_obj))
        assert n_infeasible >= 40  # the forced fifth of the instances


def test_04_risk_multiplier_quantiles():
    with _Budget("04 risk-multiplier", 1):
        for p in (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99):
            assert abs(risk_multiplier(p) - ndtri(p)) < 1e-9


# Table I reference values for the named cells (in-domain / OOD / overall)
_TABLE1 = {
    "deup_in": 0.067, "anchored_in": 0.491,
    "anchored_ood": 0.196, "ensemble_ood": 0.474,
    "dadee_overall": 0.069,
}
_T5_ESTIMATORS = ("swag", "mc_dropout", "laplace", "ensemble",
                  "anchored", "mllv", "deup", "dadee")


def test_05_bench1d_orderings():
    with _Budget("05 calibration-orderings", 15 * 60):
        per_seed = {name: {"in": [], "ood": [], "all": []}
                    for name in _T5_ESTIMATORS}
        for seed in range(5):
            rows = run_sweep(Bench1dConfig(seed=seed), list(_T5_ESTIMATORS),
                             TrainConfig(epochs=1000, learning_rate=1e-4,
                                         batch_size=20, seed=seed))
            for row in rows:
                assert isinstance(row, MetricReport), f"estimator failed: {row}"
                per_seed[row.estimator]["in"].append(row.rmsce_in)
                per_seed[row.estimator]["ood"].append(row.rmsce_ood)
                per_seed[row.estimator]["all"].append(row.rmsce)
        med = {name: {k: float(np.median(v)) for k, v in d.items()}
               for name, d in per_seed.items()}
        print("medians:", json.dumps(med, indent=2, sort_keys=True))
        # (a) DEUP better calibrated in-domain than anchored ensembles
        assert med["deup"]["in"] < med["anchored"]["in"]
        # (b) anchored better calibrated OOD than deep ensembles
        assert med["anchored"]["ood"] < med["ensemble"]["ood"]
        # (c) the combined estimator has the lowest overall calibration error
        dadee = med["dadee"]["all"]
        for name in _T5_ESTIMATORS:
            if name != "dadee":
                assert dadee < med[name]["all"], f"dadee not below {name}"
        # named absolute values within the +-0.15 band
        assert abs(med["deup"]["in"] - _TABLE1["deup_in"]) <= 0.15
        assert abs(med["anchored"]["in"] - _TABLE1["anchored_in"]) <= 0.15
        assert abs(med["anchored"]["ood"] - _TABLE1["anchored_ood"]) <= 0.15
        assert abs(med["ensemble"]["ood"] - _TABLE1["ensemble_ood"]) <= 0.15
        assert abs(dadee - _TABLE1["dadee_overall"]) <= 0.15


def test_06_shrinkage():
    with _Budget("06 shrinkage", 10 * 60):
        bench = Bench1dConfig(seed=0)
        # partial-convergence budget: at full convergence the residual member
        # disagreement is optimization noise rather than a data-volume effect
        series = shrinkage_study(bench, "ensemble", TrainConfig(seed=0, epochs=100))
        values = [v for _, v in series]
        print("ensemble shrinkage:", values)
        assert all(a > b for a, b in zip(values, values[1:])), \
            "ensemble variance not strictly decreasing"
        noise = 1.0 / 12.0
        for name in ("deup", "dadee"):
            series = shrinkage_study(bench, name, TrainConfig(seed=0))
            print(name, "variances:", [v for _, v in series])
            for factor, var in series:
                assert 0.5 * noise <= var <= 1.5 * noise, \
                    f"{name} at factor {factor}: {var} outside the noise band"


def test_07_sensitivity_ordering():
    with _Budget("07 dropout-sensitivity", 2 * 60):
        for seed in range(5):
            data, split = generate(Bench1dConfig(seed=seed))
            cfg = TrainConfig(seed=seed)
            fresh = sensitivity(fit_estimator("mc_dropout", data, cfg),
                                split.inputs)
            frozen = sensitivity(fit_estimator("mc_dropf", data, cfg),
                                 split.inputs)
            assert fresh > frozen > 0, (seed, fresh, frozen)


def test_08_closed_loop_safety_oracle():
    with _Budget("08 closed-loop-oracle", 2 * 60):
        for seed in range(5):
            report = run_episode(SimConfig(episode_steps=5000), "oracle",
                                 seed=seed)
            assert report.violations == 0, (seed, report.violations)


def test_09_sim_error_rate_trends():
    with _Budget("09 error-rate-trends", 30 * 60):
        cfg = SimConfig(seed=0)
        p_grid = (0.5, 0.6, 0.7, 0.8, 0.9)
        rows = error_rate_sweep(cfg, estimators=("baseline", "dadee"),
                                p_values=p_grid, n_runs=20)
        rows += error_rate_sweep(cfg, estimators=("anchored",),
                                 p_values=(0.5, 0.9), n_runs=20)
        table = sweep_table(rows)
        print("mean error rates:",
              {f"{k[0]}@{k[1]}": round(v, 4) for k, v in sorted(table.items())})
        for p in p_grid:
            assert table[("baseline", p)] > table[("dadee", p)], p
        assert table[("dadee", 0.9)] < 0.05
        assert table[("dadee", 0.9)] < table[("dadee", 0.5)]
        assert table[("anchored", 0.9)] < table[("anchored", 0.5)]


def _strip_timing(csv_text: str) -> str:
    lines = csv_text.strip().splitlines()
    header = lines[0].split(",")
    keep = [i for i, c in enumerate(header)
            if c not in MetricReport.TIMING_COLUMNS]
    return "\n".join(",".join(line.split(",")[i] for i in keep
                              if i < len(line.split(",")))
                     for line in lines)


def test_10_determinism(tmp_path):
    with _Budget("10 determinism", 5 * 60):
        bench_cfg = tmp_path / "bench.json"
        bench_cfg.write_text(json.dumps({"n_train": 60, "n_test": 80,
                                         "epochs": 5,
                                         "estimators": ["mlp", "gp", "deup"]}))
        sim_cfg = tmp_path / "sim.json"
        sim_cfg.write_text(json.dumps({"episode_steps": 60, "train_epochs": 2}))
        outputs = {"bench": [], "sim": [], "digest": []}
        for rep in ("a", "b"):
            bout = tmp_path / f"bench_{rep}"
            assert dispatch(["bench1d", "--config", str(bench_cfg),
                             "--out", str(bout), "--seed", "5"]) == 0
            outputs["bench"].append(
                _strip_timing((bout / "bench1d.csv").read_text()))
            sout = tmp_path / f"sim_{rep}"
            assert dispatch(["simulate", "--estimator", "dadee", "--runs", "2",
                             "--config", str(sim_cfg), "--out", str(sout),
                             "--seed", "5"]) == 0
            outputs["sim"].append((sout / "table2.csv").read_bytes())
            manifest = json.loads((sout / "manifest.json").read_text())
            outputs["digest"].append(manifest["config_digest"])
        assert outputs["bench"][0] == outputs["bench"][1]
        assert outputs["sim"][0] == outputs["sim"][1]
        assert outputs["digest"][0] == outputs["digest"][1]
