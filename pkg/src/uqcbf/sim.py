"""Desk-scale unicycle simulator with online dynamics learning.

A kinematic unicycle circles three checkpoints inside an elliptical room
with an elliptical obstacle (the couch) at the center.  The plant carries
actuation gains unknown to the learner; a dynamics model is retrained from a
replay buffer while a chance-constrained cone program filters every control.
The headline measurement is the error rate: barrier violations divided by
the number of steps on which a barrier constraint was active.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore
from .barriers import (BarrierSpec, ConeProgram, DynamicsPrediction,
                       barrier_value, build_program, cbc_distribution,
                       goal_descent_vector, lookahead_point)
from .socp import feasibility_fallback, solve

logger = logging.getLogger(__name__)

N_STATE = 3
N_UBAR = 3  # [1; v; omega]

SIM_ESTIMATORS = ("oracle", "baseline", "mc_dropout", "anchored", "deup", "dadee")


def _default_barriers():
    couch = BarrierSpec(center=(0.0, 0.0),
                        q_matrix=(1.0 / 1.5 ** 2, 0.0, 0.0, 1.0 / 1.0 ** 2),
                        sign=+1)
    room = BarrierSpec(center=(0.0, 0.0),
                       q_matrix=(1.0 / 5.0 ** 2, 0.0, 0.0, 1.0 / 4.0 ** 2),
                       sign=-1)
    return (couch, room)


def _default_checkpoints():
    a, b = 3.0, 2.4
    return tuple((a * math.cos(t), b * math.sin(t))
                 for t in (0.0, 2 * math.pi / 3, 4 * math.pi / 3))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    u_min: tuple = (-1.0, -2.0)
    u_max: tuple = (1.0, 2.0)
    barriers: tuple = field(default_factory=_default_barriers)
    checkpoints: tuple = field(default_factory=_default_checkpoints)
    checkpoint_radius: float = 0.3
    buffer_capacity: int = 10_000
    train_every: int = 20
    train_epochs: int = 10
    epsilon: float = 0.1
    p_k: float = 0.9
    episode_steps: int = 400
    # start close to the couch so the early-learning transient is exercised
    start_pose: tuple = (2.0, 0.0, math.pi / 2)
    actuation_gains: tuple = (0.9, 1.1)
    look_ahead: float = 0.1
    zeta: float = 0.01
    goal_weight: float = 5.0
    active_margin: float = 0.2
    learn_rate: float = 3e-3
    hidden_layers: int = 2
    hidden_units: int = 16
    ensemble_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be positive")
        if len(self.checkpoints) != 3:
            raise ValueError("exactly three checkpoints are required")


@dataclass
class SimState:
    pose: tuple  # (x, y, theta), theta wrapped to (-pi, pi]
    active_checkpoint: int = 0
    step: int = 0

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=float)


@dataclass
class EpisodeReport:
    error_rate: float
    steps_cbc_active: int
    violations: int
    infeasible_events: int
    trajectory: list
    seed: int
    controls: list = field(default_factory=list)
    barrier_trace: list = field(default_factory=list)  # (h_c, h_o, status)


class ReplayBuffer:
    """Bounded FIFO of (state, control, observed xdot); oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.entries = deque(maxlen=capacity)
        self.capacity = capacity

    def __len__(self):
        return len(self.entries)

    def push(self, state, control, xdot):
        self.entries.append((np.asarray(state, dtype=float),
                             np.asarray(control, dtype=float),
                             np.asarray(xdot, dtype=float)))

    def arrays(self):
        states = np.stack([e[0] for e in self.entries])
        controls = np.stack([e[1] for e in self.entries])
        xdots = np.stack([e[2] for e in self.entries])
        return states, controls, xdots


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


def true_dynamics_matrix(state: np.ndarray, gains: tuple) -> np.ndarray:
    """Ground-truth F(x) with xdot = F(x) [1; v; omega]."""
    g_v, g_w = gains
    theta = state[2]
    return np.array([[0.0, g_v * math.cos(theta), 0.0],
                     [0.0, g_v * math.sin(theta), 0.0],
                     [0.0, 0.0, g_w]])


def true_step(state: SimState, u: np.ndarray, config: SimConfig) -> SimState:
    """Euler step of the gain-scaled unicycle."""
    x = state.array
    xdot = true_dynamics_matrix(x, config.actuation_gains) @ np.concatenate([[1.0], u])
    nxt = x + config.dt * xdot
    return SimState(pose=(nxt[0], nxt[1], wrap_angle(nxt[2])),
                    active_checkpoint=state.active_checkpoint,
                    step=state.step + 1)


def observe_derivative(prev: np.ndarray, nxt: np.ndarray, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    prev = np.asarray(prev, dtype=float)
    nxt = np.asarray(nxt, dtype=float)
    diff = nxt - prev
    diff[2] = wrap_angle(diff[2])
    return diff / dt


def features(state: np.ndarray) -> np.ndarray:
    """Learner input (cos theta, sin theta, x, y); respects angular topology."""
    x, y, theta = state
    return np.array([math.cos(theta), math.sin(theta), x, y])


# ---------------------------------------------------------------------------
# dynamics learners


def _adam_train(params, spec, feats, dldout_fn, epochs, lr, rng,
                batch_size=20, anchor=None, lam=0.0, masks=False):
    """Mini-batch Adam over a custom output-space gradient.

    dldout_fn(out, idx) must return (loss_value, dL/d(out)) for the batch
    rows idx.  The anchored quadratic uses the same proximal update as the
    core trainer, so it stays stable for any lambda.
    """
    n = len(feats)
    batch = min(batch_size, n)
    m1 = np.zeros_like(params.values)
    m2 = np.zeros_like(params.values)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    prox = 2.0 * lr * lam / n if anchor is not None else 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            mk = None
            if masks and spec.dropout_rate > 0:
                mk = [(rng.random((len(idx), spec.hidden_units))
                       >= spec.dropout_rate).astype(float)
                      for _ in range(spec.hidden_layers)]
            out, cache = nncore._forward_cached(params, spec, feats[idx], mk)
            _, dldout = dldout_fn(out, idx)
            grad = nncore.backprop(cache, dldout)
            step += 1
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad ** 2
            params.values -= lr * (m1 / (1 - b1 ** step)) / (
                np.sqrt(m2 / (1 - b2 ** step)) + eps)
            if prox:
                params.values += prox * anchor.values
                params.values /= 1.0 + prox
    return params


def _dyn_loss_grad(out, ubars, xdots, idx):
    f = out.reshape(len(out), N_STATE, N_UBAR)
    pred = np.einsum("nij,nj->ni", f, ubars[idx])
    resid = pred - xdots[idx]
    value = float(np.mean(np.sum(resid ** 2, axis=1)))
    dldout = (2.0 / len(out)) * np.einsum("ni,nj->nij", resid, ubars[idx])
    return value, dldout.reshape(len(out), -1)


def _var_loss_grad(out, ubars, sq_resid, idx):
    sig2 = nncore.softplus_var(out).reshape(len(out), N_STATE, N_UBAR)
    u2 = ubars[idx] ** 2
    pred = np.einsum("nij,nj->ni", sig2, u2)
    resid = pred - sq_resid[idx]
    value = float(np.mean(np.sum(resid ** 2, axis=1)))
    dsig2 = (2.0 / len(out)) * np.einsum("ni,nj->nij", resid, u2)
    dldout = dsig2.reshape(len(out), -1) * nncore._sigmoid(out)
    return value, dldout


class OracleDynamics:
    """True plant matrix, zero variance; for the invariance check."""

    def __init__(self, config: SimConfig):
        self.gains = config.actuation_gains

    trainable = False

    def predict(self, state: np.ndarray) -> DynamicsPrediction:
        return DynamicsPrediction(true_dynamics_matrix(state, self.gains))

    def update(self, buffer: ReplayBuffer) -> None:
        pass


class LearnedDynamics:
    """Networks mapping features(x) to the flattened 3x3 dynamics matrix.

    kind selects the uncertainty construction:
      baseline    single net, no variance
      mc_dropout  single dropout net; members are fresh-mask passes
      anchored    anchored ensemble; members give epistemic deviation rows
      deup        single mean net plus a per-entry variance net
      dadee       anchored ensemble plus the variance net (both row blocks)
    """

    trainable = True

    def __init__(self, kind: str, config: SimConfig, rng: np.random.Generator):
        if kind not in SIM_ESTIMATORS or kind == "oracle":
            raise ValueError(f"unknown learned-dynamics kind {kind!r}")
        self.kind = kind
        self.config = config
        self.rng = rng
        dropout = 0.1 if kind == "mc_dropout" else 0.0
        self.spec = nncore.NetworkSpec(4, N_STATE * N_UBAR, config.hidden_layers,
                                       config.hidden_units, dropout_rate=dropout)
        n_members = config.ensemble_size if kind in ("anchored", "dadee") else 1
        self.members = [nncore.init_params(self.spec, rng) for _ in range(n_members)]
        self.anchors = None
        self.anchor_lam = 0.1
        if kind in ("anchored", "dadee"):
            self.anchors = [nncore.sample_prior(self.spec, rng) for _ in self.members]
            self.members = [a.copy() for a in self.anchors]
        self.var_spec = None
        self.var_params = None
        if kind in ("deup", "dadee"):
            self.var_spec = nncore.NetworkSpec(4, N_STATE * N_UBAR,
                                               config.hidden_layers,
                                               config.hidden_units)
            self.var_params = nncore.init_params(self.var_spec, rng)
        self.n_updates = 0

    def _member_matrix(self, params, feat, masks=None):
        out = nncore.forward(params, self.spec, feat, masks)
        return out.reshape(N_STATE, N_UBAR)

    def predict(self, state: np.ndarray) -> DynamicsPrediction:
        feat = features(np.asarray(state, dtype=float))
        if self.kind == "mc_dropout":
            mats = []
            for _ in range(self.config.ensemble_size):
                masks = nncore.sample_dropout_masks(self.spec, self.rng)
                mats.append(self._member_matrix(self.members[0], feat, masks))
            members = np.stack(mats)
            return DynamicsPrediction(members.mean(axis=0), members=members)
        mats = np.stack([self._member_matrix(m, feat) for m in self.members])
        mean = mats.mean(axis=0)
        members = mats if len(mats) >= 2 else None
        entry_std = None
        if self.var_params is not None:
            raw = nncore.forward(self.var_params, self.var_spec, feat)
            entry_std = np.sqrt(nncore.softplus_var(raw)).reshape(N_STATE, N_UBAR)
        return DynamicsPrediction(mean, members=members, entry_std=entry_std)

    def update(self, buffer: ReplayBuffer) -> None:
        if len(buffer) < 2:
            return
        states, controls, xdots = buffer.arrays()
        feats = np.stack([features(s) for s in states])
        ubars = np.hstack([np.ones((len(controls), 1)), controls])
        cfg = self.config
        for i, params in enumerate(self.members):
            anchor = self.anchors[i] if self.anchors is not None else None
            _adam_train(params, self.spec, feats,
                        lambda out, idx: _dyn_loss_grad(out, ubars, xdots, idx),
                        cfg.train_epochs, cfg.learn_rate, self.rng,
                        anchor=anchor,
                        lam=self.anchor_lam if anchor is not None else 0.0,
                        masks=(self.kind == "mc_dropout"))
        if self.var_params is not None:
            mean_out = np.stack([
                nncore.forward(m, self.spec, feats) for m in self.members
            ]).mean(axis=0).reshape(len(feats), N_STATE, N_UBAR)
            pred = np.einsum("nij,nj->ni", mean_out, ubars)
            sq_resid = (pred - xdots) ** 2
            _adam_train(self.var_params, self.var_spec, feats,
                        lambda out, idx: _var_loss_grad(out, ubars, sq_resid, idx),
                        cfg.train_epochs, cfg.learn_rate, self.rng)
        self.n_updates += 1


def make_dynamics_model(kind: str, config: SimConfig, rng: np.random.Generator):
    if kind == "oracle":
        return OracleDynamics(config)
    return LearnedDynamics(kind, config, rng)


# ---------------------------------------------------------------------------
# control loop


def build_control_program(model, state: SimState, config: SimConfig,
                          p: float) -> ConeProgram:
    x = state.array
    dyn = model.predict(x)
    cbcs = [cbc_distribution(spec, dyn, x, look_ahead=config.look_ahead)
            for spec in config.barriers]
    goal = config.checkpoints[state.active_checkpoint]
    qvec = goal_descent_vector(dyn.mean, x, goal, offset=config.look_ahead)
    return build_program(cbcs, p=p, zeta=config.zeta,
                         u_min=config.u_min, u_max=config.u_max,
                         goal_gradient=qvec, goal_weight=config.goal_weight)


def epsilon_greedy_safe(u_opt: np.ndarray, config: SimConfig,
                        program: ConeProgram, rng: np.random.Generator) -> np.ndarray:
    """With prob epsilon, move to the feasible control closest to a random one."""
    if rng.random() >= config.epsilon:
        return u_opt
    u_r = rng.uniform(config.u_min, config.u_max)
    if program.min_margin(u_r) >= -1e-9:
        return u_r
    proj = ConeProgram(program.p_matrix, -2.0 * u_r, program.cones,
                       program.u_min, program.u_max)
    res = solve(proj, thorough=False)
    return res.u if res.ok else u_opt


def run_episode(config: SimConfig, estimator_kind: str,
                seed: int | None = None) -> EpisodeReport:
    """Closed-loop episode; see module docstring for the error-rate definition."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    model = make_dynamics_model(estimator_kind, config, rng)
    buffer = ReplayBuffer(config.buffer_capacity)
    p_eff = 0.5 if estimator_kind in ("oracle", "baseline") else config.p_k

    state = SimState(pose=tuple(config.start_pose), active_checkpoint=1)
    trajectory = [state]
    controls = []
    barrier_trace = []
    violations = 0
    active_steps = 0
    infeasible_events = 0

    for step in range(config.episode_steps):
        program = build_control_program(model, state, config, p_eff)
        res = solve(program, thorough=False)
        status = res.status
        if not res.ok:
            infeasible_events += 1

            def rebuild():
                model.update(buffer)
                return build_control_program(model, state, config, p_eff)

            res, actions = feasibility_fallback(
                program,
                rebuild_after_retrain=rebuild if model.trainable and len(buffer) else None,
                thorough=False)
            status = "fallback:" + (actions[-1] if actions else "none")
        u = epsilon_greedy_safe(res.u, config, program, rng)
        u = np.clip(u, config.u_min, config.u_max)
        active = program.min_margin(u) <= config.active_margin
        nxt = true_step(state, u, config)
        xdot = observe_derivative(state.array, nxt.array, config.dt)
        buffer.push(state.array, u, xdot)

        p_next = lookahead_point(nxt.array, config.look_ahead)
        h_vals = [barrier_value(spec, p_next) for spec in config.barriers]
        if active:
            active_steps += 1
            if min(h_vals) < 0:
                violations += 1
        barrier_trace.append((*h_vals, status))
        controls.append(np.array(u))

        goal = np.asarray(config.checkpoints[nxt.active_checkpoint])
        if np.linalg.norm(nxt.array[:2] - goal) <= config.checkpoint_radius:
            nxt.active_checkpoint = (nxt.active_checkpoint + 1) % 3
        state = nxt
        trajectory.append(state)

        if (model.trainable and (step + 1) % config.train_every == 0
                and len(buffer) >= 2):
            model.update(buffer)

    return EpisodeReport(error_rate=violations / max(active_steps, 1),
                         steps_cbc_active=active_steps,
                         violations=violations,
                         infeasible_events=infeasible_events,
                         trajectory=trajectory,
                         seed=seed,
                         controls=controls,
                         barrier_trace=barrier_trace)


def save_trajectory_csv(report: EpisodeReport, path) -> None:
    """CSV columns: step, x, y, theta, v, omega, h_c, h_o, status."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "x", "y", "theta", "v", "omega",
                         "h_c", "h_o", "status"])
        for i, (u, (h_c, h_o, status)) in enumerate(
                zip(report.controls, report.barrier_trace)):
            s = report.trajectory[i]
            writer.writerow([i, repr(s.pose[0]), repr(s.pose[1]),
                             repr(s.pose[2]), repr(float(u[0])),
                             repr(float(u[1])), repr(h_c), repr(h_o), status])


SWEEP_COLUMNS = ("estimator", "p", "run", "seed", "error_rate", "violations",
                 "steps_cbc_active", "infeasible_events")


def error_rate_sweep(config: SimConfig,
                     estimators=("baseline", "mc_dropout", "anchored", "deup", "dadee"),
                     p_values=(0.5, 0.6, 0.7, 0.8, 0.9),
                     n_runs: int = 20) -> list[dict]:
    """Per-(estimator, p, run) error rates; baseline is p-independent, so its
    runs are computed once and replicated across the p grid."""
    rows = []
    root = np.random.SeedSequence(config.seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n_runs)]
    for estimator in estimators:
        baseline_cache = {}
        for p in p_values:
            for run, seed in enumerate(seeds):
                if estimator == "baseline" and run in baseline_cache:
                    rep = baseline_cache[run]
                else:
                    try:
                        rep = run_episode(replace(config, p_k=p), estimator,
                                          seed=seed)
                    except Exception:
                        logger.exception("sweep cell failed: %s p=%s run=%s",
                                         estimator, p, run)
                        rows.append({"estimator": estimator, "p": p, "run": run,
                                     "seed": seed, "error_rate": float("nan"),
                                     "violations": -1, "steps_cbc_active": -1,
                                     "infeasible_events": -1})
                        continue
                    if estimator == "baseline":
                        baseline_cache[run] = rep
                rows.append({"estimator": estimator, "p": p, "run": run,
                             "seed": seed, "error_rate": rep.error_rate,
                             "violations": rep.violations,
                             "steps_cbc_active": rep.steps_cbc_active,
                             "infeasible_events": rep.infeasible_events})
    return rows


def sweep_table(rows: list[dict]) -> dict:
    """Mean error rate per (estimator, p), NaN cells skipped."""
    table = {}
    for row in rows:
        key = (row["estimator"], row["p"])
        table.setdefault(key, []).append(row["error_rate"])
    return {k: float(np.nanmean(v)) for k, v in table.items()}


def save_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
