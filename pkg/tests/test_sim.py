import itertools
import math

import numpy as np
import pytest

from uqcbf.barriers import ConeConstraint, ConeProgram
from uqcbf.sim import (ReplayBuffer, SimConfig, SimState, _dyn_loss_grad,
                       _var_loss_grad, epsilon_greedy_safe, error_rate_sweep,
                       features, make_dynamics_model, observe_derivative,
                       run_episode, save_sweep_csv, save_trajectory_csv,
                       sweep_table, true_dynamics_matrix, true_step, wrap_angle)

FAST = SimConfig(episode_steps=60, train_every=20, train_epochs=3)


class TestTrueStep:
    def test_forward_drive(self):
        cfg = SimConfig(dt=0.1, actuation_gains=(1.0, 1.0))
        s = true_step(SimState(pose=(0, 0, 0)), np.array([1.0, 0.0]), cfg)
        assert s.pose == pytest.approx((0.1, 0.0, 0.0))

    def test_pure_rotation(self):
        cfg = SimConfig(dt=0.1, actuation_gains=(1.0, 1.3))
        s = true_step(SimState(pose=(0.5, -0.2, 0.0)), np.array([0.0, 1.0]), cfg)
        assert s.pose[:2] == pytest.approx((0.5, -0.2))
        assert s.pose[2] == pytest.approx(0.13)

    def _substep_gap(self, dt, u):
        coarse = true_step(SimState(pose=(1.0, 0.5, 0.3)), u, SimConfig(dt=dt))
        s = SimState(pose=(1.0, 0.5, 0.3))
        for _ in range(10):
            s = true_step(s, u, SimConfig(dt=dt / 10))
        return np.linalg.norm(np.array(coarse.pose) - np.array(s.pose))

    def test_substep_gap_second_order(self):
        # analytic one-step gap is ~ dt^2 * v * omega / 2, so the honest
        # bound at dt=0.05 and |u| <= 2 is 5e-3, not tighter; the O(dt^2)
        # order is what the fine-integration oracle certifies
        u = np.array([1.0, 2.0])
        gap = self._substep_gap(0.05, u)
        assert gap < 5e-3
        ratio = gap / self._substep_gap(0.025, u)
        assert 3.0 < ratio < 5.0

    def test_gains_scale_velocities(self):
        cfg = SimConfig(dt=0.1, actuation_gains=(0.9, 1.1))
        f = true_dynamics_matrix(np.array([0, 0, 0.0]), cfg.actuation_gains)
        assert f[0, 1] == pytest.approx(0.9)
        assert f[2, 2] == pytest.approx(1.1)
        assert np.all(f[:, 0] == 0)


class TestObserveDerivative:
    def test_plain_difference(self):
        xd = observe_derivative([0, 0, 0], [0.1, 0, 0], 0.1)
        assert xd == pytest.approx([1.0, 0.0, 0.0])

    def test_wrap_across_seam(self):
        xd = observe_derivative([0, 0, 3.1], [0, 0, -3.1], 0.1)
        assert xd[2] == pytest.approx((2 * math.pi - 6.2) / 0.1)
        assert xd[2] == pytest.approx(0.832, abs=5e-3)

    def test_zero_motion(self):
        assert observe_derivative([1, 2, 0.5], [1, 2, 0.5], 0.05) == pytest.approx([0, 0, 0])

    def test_dt_positive(self):
        with pytest.raises(ValueError):
            observe_derivative([0, 0, 0], [1, 0, 0], 0.0)


class TestWrapAngle:
    def test_range(self):
        for theta in np.linspace(-20, 20, 101):
            w = wrap_angle(theta)
            assert -math.pi < w <= math.pi
            assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-12)
            assert math.sin(w) == pytest.approx(math.sin(theta), abs=1e-12)


class TestReplayBuffer:
    def test_capacity_and_fifo(self):
        buf = ReplayBuffer(3)
        for i in range(5):
            buf.push([i, 0, 0], [0, 0], [0, 0, 0])
        assert len(buf) == 3
        states, _, _ = buf.arrays()
        assert states[:, 0].tolist() == [2, 3, 4]

    def test_capacity_positive(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)


class TestLossGradients:
    def test_dyn_loss_numeric(self):
        rng = np.random.default_rng(0)
        n = 4
        out = rng.normal(size=(n, 9))
        ubars = rng.normal(size=(n, 3))
        xdots = rng.normal(size=(n, 3))
        idx = np.arange(n)
        value, grad = _dyn_loss_grad(out, ubars, xdots, idx)
        eps = 1e-6
        for k in range(9):
            op = out.copy(); op[1, k] += eps
            om = out.copy(); om[1, k] -= eps
            fd = (_dyn_loss_grad(op, ubars, xdots, idx)[0]
                  - _dyn_loss_grad(om, ubars, xdots, idx)[0]) / (2 * eps)
            assert fd == pytest.approx(grad[1, k], rel=1e-5, abs=1e-7)

    def test_var_loss_numeric(self):
        rng = np.random.default_rng(1)
        n = 3
        out = rng.normal(size=(n, 9))
        ubars = rng.normal(size=(n, 3))
        sq = rng.uniform(0, 1, size=(n, 3))
        idx = np.arange(n)
        _, grad = _var_loss_grad(out, ubars, sq, idx)
        eps = 1e-6
        for k in range(9):
            op = out.copy(); op[0, k] += eps
            om = out.copy(); om[0, k] -= eps
            fd = (_var_loss_grad(op, ubars, sq, idx)[0]
                  - _var_loss_grad(om, ubars, sq, idx)[0]) / (2 * eps)
            assert fd == pytest.approx(grad[0, k], rel=1e-5, abs=1e-7)


class _StubRng:
    """Deterministic stand-in driving the exploration branch."""

    def __init__(self, r, u):
        self._r, self._u = r, np.asarray(u, dtype=float)

    def random(self):
        return self._r

    def uniform(self, lo, hi):
        return self._u


class TestEpsilonGreedy:
    def _box_program(self, cones=()):
        return ConeProgram(np.eye(2), np.zeros(2), list(cones), [-1, -1], [1, 1])

    def test_epsilon_zero_returns_optimum(self):
        cfg = SimConfig(epsilon=0.0)
        u_opt = np.array([0.3, -0.2])
        rng = np.random.default_rng(0)
        out = epsilon_greedy_safe(u_opt, cfg, self._box_program(), rng)
        assert out is u_opt

    def test_feasible_random_returned_unchanged(self):
        cfg = SimConfig(epsilon=1.0)
        u_r = [0.4, 0.1]
        out = epsilon_greedy_safe(np.zeros(2), cfg, self._box_program(),
                                  _StubRng(0.0, u_r))
        assert out == pytest.approx(u_r)

    def test_projection_matches_analytic(self):
        # halfspace u1 >= 0.5; closest point to (0, 0) is (0.5, 0)
        cone = ConeConstraint(0.0, np.zeros((1, 3)), np.array([1.0, 0.0]), -0.5)
        cfg = SimConfig(epsilon=1.0)
        out = epsilon_greedy_safe(np.array([0.9, 0.9]), cfg,
                                  self._box_program([cone]),
                                  _StubRng(0.0, [0.0, 0.0]))
        assert out == pytest.approx([0.5, 0.0], abs=1e-6)


class TestRunEpisode:
    def test_oracle_invariance_short(self):
        for seed in (0, 1):
            rep = run_episode(SimConfig(episode_steps=300), "oracle", seed=seed)
            assert rep.violations == 0
            assert min(min(h_c, h_o) for h_c, h_o, _ in rep.barrier_trace) >= 0

    def test_controls_within_bounds(self):
        cfg = FAST
        rep = run_episode(cfg, "baseline", seed=3)
        for u in rep.controls:
            assert np.all(u >= np.asarray(cfg.u_min) - 1e-12)
            assert np.all(u <= np.asarray(cfg.u_max) + 1e-12)

    def test_checkpoint_sequence_cyclic(self):
        rep = run_episode(SimConfig(episode_steps=1500), "oracle", seed=0)
        seq = [k for k, _ in itertools.groupby(s.active_checkpoint
                                               for s in rep.trajectory)]
        assert len(seq) >= 4  # at least one full lap
        for a, b in zip(seq[:-1], seq[1:]):
            assert b == (a + 1) % 3

    def test_same_seed_identical_report(self):
        a = run_episode(FAST, "baseline", seed=7)
        b = run_episode(FAST, "baseline", seed=7)
        assert a.error_rate == b.error_rate
        assert a.violations == b.violations
        assert [s.pose for s in a.trajectory] == [s.pose for s in b.trajectory]
        assert all(np.array_equal(x, y) for x, y in zip(a.controls, b.controls))

    def test_error_rate_definition(self):
        rep = run_episode(FAST, "baseline", seed=1)
        assert rep.error_rate == rep.violations / max(rep.steps_cbc_active, 1)

    def test_unknown_estimator(self):
        with pytest.raises(ValueError):
            make_dynamics_model("husky", FAST, np.random.default_rng(0))


class TestEstimatorPredictions:
    def test_shapes_per_kind(self):
        rng = np.random.default_rng(0)
        state = np.array([2.0, 0.0, 0.5])
        for kind in ("baseline", "mc_dropout", "anchored", "deup", "dadee"):
            model = make_dynamics_model(kind, FAST, rng)
            dyn = model.predict(state)
            assert dyn.mean.shape == (3, 3)
            if kind in ("mc_dropout", "anchored", "dadee"):
                assert dyn.members is not None
            if kind in ("deup", "dadee"):
                assert dyn.entry_std is not None
                assert np.all(dyn.entry_std >= 0)

    def test_training_reduces_dynamics_error(self):
        cfg = SimConfig(episode_steps=200)
        rng = np.random.default_rng(5)
        model = make_dynamics_model("baseline", cfg, rng)
        buf = ReplayBuffer(cfg.buffer_capacity)
        for _ in range(300):
            state = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3),
                              rng.uniform(-math.pi, math.pi)])
            u = rng.uniform(cfg.u_min, cfg.u_max)
            f = true_dynamics_matrix(state, cfg.actuation_gains)
            buf.push(state, u, f @ np.concatenate([[1.0], u]))
        state = np.array([1.0, 1.0, 0.3])
        truth = true_dynamics_matrix(state, cfg.actuation_gains)
        before = np.linalg.norm(model.predict(state).mean - truth)
        for _ in range(10):
            model.update(buf)
        after = np.linalg.norm(model.predict(state).mean - truth)
        assert after < before
        assert after < 0.3


class TestSweep:
    def test_rows_and_csv(self, tmp_path):
        cfg = SimConfig(episode_steps=40, train_epochs=2, seed=11)
        rows = error_rate_sweep(cfg, estimators=("baseline", "oracle"),
                                p_values=(0.5, 0.9), n_runs=2)
        assert len(rows) == 2 * 2 * 2
        table = sweep_table(rows)
        assert set(table) == {("baseline", 0.5), ("baseline", 0.9),
                              ("oracle", 0.5), ("oracle", 0.9)}
        # baseline ignores p, so its per-run numbers repeat across the grid
        assert table[("baseline", 0.5)] == table[("baseline", 0.9)]
        out = tmp_path / "sweep.csv"
        save_sweep_csv(rows, out)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == len(rows) + 1
        assert lines[0].startswith("estimator,p,run,seed,error_rate")

    def test_trajectory_csv(self, tmp_path):
        rep = run_episode(FAST, "oracle", seed=0)
        out = tmp_path / "traj.csv"
        save_trajectory_csv(rep, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "step,x,y,theta,v,omega,h_c,h_o,status"
        assert len(lines) == len(rep.controls) + 1


def test_features_topology():
    f = features(np.array([1.0, -2.0, math.pi]))
    g = features(np.array([1.0, -2.0, -math.pi]))
    assert f == pytest.approx(g)
    assert f[2:] == pytest.approx([1.0, -2.0])
