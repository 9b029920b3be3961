"""Posterior predictors behind one interface: fit -> model, predict -> (mean, variance).

Covers point MLPs, deep/anchored ensembles, MC-Dropout (fresh and frozen
masks), SWAG, a dense Gauss-Newton Laplace approximation, MLLV, DEUP, the
combined aleatoric+epistemic estimator (DADEE), and an exact GP baseline.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nncore
from .gp import GpModel, fit_gp_ml, predict_gp
from .nncore import (
    Dataset,
    NetworkSpec,
    ParamVector,
    TrainConfig,
    forward,
    init_params,
    sample_prior,
    softplus_var,
    train,
)


@dataclass
class PosteriorPrediction:
    """Per-query predictive mean and diagonal variance, shape (N, d_out)."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        self.variance = np.atleast_2d(np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.variance < 0):
            raise ValueError("negative predictive variance")


def _member_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


# ---------------------------------------------------------------------------
# Ensembles


@dataclass
class EnsembleModel:
    members: list[ParamVector]
    spec: NetworkSpec
    kind: str  # "deep" or "anchored"
    anchors: list[ParamVector] | None = None
    lam: float | None = None

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if self.kind == "anchored" and (self.anchors is None or self.lam is None):
            raise ValueError("anchored ensembles need anchors and lambda")

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        return predict_ensemble(self, x)

    def member_outputs(self, x: np.ndarray) -> np.ndarray:
        """Stacked member outputs, shape (L, N, d_out)."""
        return np.stack([forward(m, self.spec, np.atleast_2d(x)) for m in self.members])


def fit_deep_ensemble(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
                      ensemble_size: int = 5) -> EnsembleModel:
    members = []
    for seed in _member_seeds(config.seed, ensemble_size):
        params, _ = train(dataset, spec, replace(config, seed=seed))
        members.append(params)
    return EnsembleModel(members, spec, "deep")


def fit_anchored_ensemble(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
                          ensemble_size: int = 5, lam: float = 10.0,
                          anchor_scale: float = 4.0) -> EnsembleModel:
    """Each member minimizes data MSE plus (lam/n)||weights - anchor||^2.

    Anchors are prior draws; `anchor_scale` widens the init prior for the
    anchors so the prior functions carry visible diversity out of domain.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    members, anchors = [], []
    for seed in _member_seeds(config.seed, ensemble_size):
        anchor = sample_prior(spec, np.random.default_rng(seed ^ 0x5EED))
        anchor.values *= anchor_scale
        cfg = replace(config, seed=seed, l2_anchor=(lam, anchor))
        # members start at their anchor (randomized-MAP convention)
        params, _ = train(dataset, spec, cfg, init=anchor)
        members.append(params)
        anchors.append(anchor)
    return EnsembleModel(members, spec, "anchored", anchors=anchors, lam=lam)


def predict_ensemble(model: EnsembleModel, x: np.ndarray) -> PosteriorPrediction:
    outs = model.member_outputs(x)
    mean = outs.mean(axis=0)
    var = outs.var(axis=0, ddof=1)
    return PosteriorPrediction(mean, var)


# ---------------------------------------------------------------------------
# MC-Dropout


class McDropoutPredictor:
    """Monte-Carlo dropout predictor.

    frozen=True draws the mask set once from the seed and reuses it for every
    query (MC-DropF); frozen=False draws fresh masks on every predict call,
    which makes the variance jittery under small input perturbations.
    """

    def __init__(self, params: ParamVector, spec: NetworkSpec, n_samples: int = 5,
                 frozen: bool = False, seed: int = 0):
        if spec.dropout_rate <= 0:
            raise ValueError("MC-Dropout needs a positive dropout rate")
        if n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        self.params = params
        self.spec = spec
        self.n_samples = n_samples
        self.frozen = frozen
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._frozen_masks = None
        if frozen:
            self._frozen_masks = [
                nncore.sample_dropout_masks(spec, self._rng) for _ in range(n_samples)
            ]

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        outs = []
        for s in range(self.n_samples):
            if self.frozen:
                masks = self._frozen_masks[s]
            else:
                masks = [
                    (self._rng.random((x.shape[0], self.spec.hidden_units))
                     >= self.spec.dropout_rate).astype(float)
                    for _ in range(self.spec.hidden_layers)
                ]
            outs.append(forward(self.params, self.spec, x, masks=masks))
        outs = np.stack(outs)
        return PosteriorPrediction(outs.mean(axis=0), outs.var(axis=0, ddof=1))


def fit_mc_dropout(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
                   n_samples: int = 5, frozen: bool = False) -> McDropoutPredictor:
    params, _ = train(dataset, spec, config)
    return McDropoutPredictor(params, spec, n_samples, frozen, seed=config.seed)


# ---------------------------------------------------------------------------
# SWAG


@dataclass
class SwagModel:
    mean_weights: ParamVector
    weight_variance: np.ndarray
    spec: NetworkSpec
    snapshots_kept: int
    sgd_lr: float
    n_samples: int = 5
    seed: int = 0

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        rng = np.random.default_rng(self.seed)
        std = np.sqrt(self.weight_variance)
        outs = []
        for _ in range(self.n_samples):
            draw = self.mean_weights.values + rng.standard_normal(len(std)) * std
            params = ParamVector(draw, self.mean_weights.shapes)
            outs.append(forward(params, self.spec, np.atleast_2d(x)))
        outs = np.stack(outs)
        return PosteriorPrediction(outs.mean(axis=0), outs.var(axis=0, ddof=1))


def fit_swag(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
             swag_lr: float = 0.03, n_snapshots: int = 10,
             n_samples: int = 5) -> SwagModel:
    """Base training with config, then n_snapshots one-epoch runs at swag_lr;
    a diagonal Gaussian is fit over the snapshot weights."""
    if n_snapshots < 2:
        raise ValueError("n_snapshots must be >= 2")
    params, _ = train(dataset, spec, config)
    # snapshot phase bounces with plain SGD at the large rate
    snap_cfg = replace(config, epochs=1, learning_rate=swag_lr, optimizer="sgd")
    snapshots = []
    for i in range(n_snapshots):
        params, _ = train(dataset, spec, replace(snap_cfg, seed=config.seed + 1 + i),
                          init=params)
        snapshots.append(params.values.copy())
    snaps = np.stack(snapshots)
    mean = snaps.mean(axis=0)
    var = np.maximum(snaps.var(axis=0), 0.0)
    return SwagModel(ParamVector(mean, spec.layer_dims), var, spec,
                     n_snapshots, swag_lr, n_samples, seed=config.seed)


# ---------------------------------------------------------------------------
# Laplace approximation (dense Gauss-Newton)


@dataclass
class LaplaceModel:
    map_weights: ParamVector
    covariance: np.ndarray
    spec: NetworkSpec
    noise_var: float

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        return predict_laplace(self, x)


def _output_jacobian(params: ParamVector, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Jacobian of the network outputs w.r.t. the flat weights, (d_out, P)."""
    out, cache = nncore._forward_cached(params, spec, np.atleast_2d(x))
    rows = []
    for d in range(spec.output_dim):
        seed_grad = np.zeros_like(out)
        seed_grad[:, d] = 1.0
        rows.append(nncore.backprop(cache, seed_grad))
    return np.stack(rows)


def fit_laplace(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
                prior_precision: float = 1.0, max_jitter: float = 1e-2) -> LaplaceModel:
    if spec.n_params > 2000:
        raise ValueError("dense Laplace limited to <= 2000 weights")
    params, _ = train(dataset, spec, config)
    pred = forward(params, spec, dataset.inputs)
    noise_var = float(max(np.mean((pred - dataset.targets) ** 2), 1e-6))
    h = prior_precision * np.eye(spec.n_params)
    for i in range(len(dataset)):
        j = _output_jacobian(params, spec, dataset.inputs[i])
        h += j.T @ j / noise_var
    jitter = 1e-8
    while True:
        try:
            cov = np.linalg.inv(h + jitter * np.eye(len(h)))
            # symmetric PSD check via Cholesky of the symmetrized inverse
            np.linalg.cholesky((cov + cov.T) / 2 + 1e-12 * np.eye(len(h)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > max_jitter:
                raise RuntimeError("Laplace covariance not PSD after max jitter")
    cov = (cov + cov.T) / 2
    return LaplaceModel(params, cov, spec, noise_var)


def predict_laplace(model: LaplaceModel, x: np.ndarray) -> PosteriorPrediction:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = forward(model.map_weights, model.spec, x)
    var = np.empty_like(mean)
    for i in range(x.shape[0]):
        j = _output_jacobian(model.map_weights, model.spec, x[i])
        var[i] = np.maximum(np.einsum("dp,pq,dq->d", j, model.covariance, j), 0.0)
    return PosteriorPrediction(mean, var + 1e-6)


# ---------------------------------------------------------------------------
# Direct estimators: MLLV, DEUP


@dataclass
class MllvModel:
    params: ParamVector
    spec: NetworkSpec  # output_dim = 2 * target_dim

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        out = forward(self.params, self.spec, np.atleast_2d(x))
        d = self.spec.output_dim // 2
        return PosteriorPrediction(out[:, :d], softplus_var(out[:, d:]))


def fit_mllv(dataset: Dataset, spec2ch: NetworkSpec, config: TrainConfig) -> MllvModel:
    if spec2ch.output_dim != 2 * dataset.targets.shape[1]:
        raise ValueError("MLLV spec needs output_dim = 2 * target_dim")
    params, _ = train(dataset, spec2ch, config, loss="mllv_nll")
    return MllvModel(params, spec2ch)


@dataclass
class DeupModel:
    mean_params: ParamVector
    variance_params: ParamVector
    spec: NetworkSpec

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        x = np.atleast_2d(x)
        mean = forward(self.mean_params, self.spec, x)
        var = softplus_var(forward(self.variance_params, self.spec, x))
        return PosteriorPrediction(mean, var)


def _fit_variance_net(inputs: np.ndarray, errors: np.ndarray, spec: NetworkSpec,
                      config: TrainConfig) -> ParamVector:
    """Regress squared errors through the softplus link.

    The output bias starts at the softplus inverse of the mean error so the
    net begins on the right scale (the link is flat far below zero).
    """
    err_data = Dataset(inputs, errors)
    init = init_params(spec, np.random.default_rng(config.seed))
    bias0 = nncore.softplus_inverse(max(float(np.mean(errors)), 1e-5))
    init.values[-spec.output_dim:] = bias0
    params, _ = train(err_data, spec, config, loss="softplus_mse", init=init)
    return params


def fit_deup(dataset: Dataset, spec: NetworkSpec, config: TrainConfig) -> DeupModel:
    mean_params, _ = train(dataset, spec, config)
    pred = forward(mean_params, spec, dataset.inputs)
    errors = (pred - dataset.targets) ** 2
    var_params = _fit_variance_net(dataset.inputs, errors, spec,
                                   replace(config, seed=config.seed + 1))
    return DeupModel(mean_params, var_params, spec)


# ---------------------------------------------------------------------------
# Combined aleatoric + epistemic (anchored ensemble + direct variance net)


@dataclass
class DadeeModel:
    ensemble: EnsembleModel
    variance_params: ParamVector
    variance_spec: NetworkSpec

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        x = np.atleast_2d(x)
        ens = predict_ensemble(self.ensemble, x)
        direct = softplus_var(forward(self.variance_params, self.variance_spec, x))
        return PosteriorPrediction(ens.mean, direct + ens.variance)


def fit_dadee(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
              ensemble_size: int = 5, lam: float = 10.0) -> DadeeModel:
    ensemble = fit_anchored_ensemble(dataset, spec, config, ensemble_size, lam)
    mean_pred = ensemble.member_outputs(dataset.inputs).mean(axis=0)
    errors = (mean_pred - dataset.targets) ** 2
    var_params = _fit_variance_net(dataset.inputs, errors, spec,
                                   replace(config, seed=config.seed + 1))
    return DadeeModel(ensemble, var_params, spec)


# ---------------------------------------------------------------------------
# Point estimator and GP wrappers


@dataclass
class PointModel:
    params: ParamVector
    spec: NetworkSpec

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        mean = forward(self.params, self.spec, np.atleast_2d(x))
        return PosteriorPrediction(mean, np.zeros_like(mean))


def fit_point(dataset: Dataset, spec: NetworkSpec, config: TrainConfig) -> PointModel:
    params, _ = train(dataset, spec, config)
    return PointModel(params, spec)


@dataclass
class GpPredictor:
    model: GpModel

    def predict(self, x: np.ndarray) -> PosteriorPrediction:
        mean, var = predict_gp(self.model, x)
        return PosteriorPrediction(mean, var)


# ---------------------------------------------------------------------------
# Registry used by the 1-D benchmark and the CLI


def _spec_for(dataset: Dataset, channels: int = 1,
              dropout_rate: float = 0.0) -> NetworkSpec:
    d_in = dataset.inputs.shape[1]
    d_out = dataset.targets.shape[1] * channels
    return NetworkSpec(d_in, d_out, hidden_layers=4, hidden_units=10,
                       dropout_rate=dropout_rate)


ESTIMATORS = {
    "mlp": lambda data, cfg: fit_point(data, _spec_for(data), cfg),
    "gp": lambda data, cfg: GpPredictor(fit_gp_ml(data.inputs, data.targets)),
    "swag": lambda data, cfg: fit_swag(data, _spec_for(data), cfg),
    "mc_dropout": lambda data, cfg: fit_mc_dropout(
        data, _spec_for(data, dropout_rate=0.2), cfg, n_samples=5, frozen=False),
    "mc_dropf": lambda data, cfg: fit_mc_dropout(
        data, _spec_for(data, dropout_rate=0.2), cfg, n_samples=5, frozen=True),
    "laplace": lambda data, cfg: fit_laplace(data, _spec_for(data), cfg),
    "ensemble": lambda data, cfg: fit_deep_ensemble(data, _spec_for(data), cfg, 5),
    "anchored": lambda data, cfg: fit_anchored_ensemble(data, _spec_for(data), cfg, 5, 10.0),
    "mllv": lambda data, cfg: fit_mllv(data, _spec_for(data, channels=2), cfg),
    "deup": lambda data, cfg: fit_deup(data, _spec_for(data), cfg),
    "dadee": lambda data, cfg: fit_dadee(data, _spec_for(data), cfg, 5, 10.0),
}


def fit_estimator(name: str, dataset: Dataset, config: TrainConfig):
    try:
        factory = ESTIMATORS[name]
    except KeyError:
        raise ValueError(f"unknown estimator {name!r}; known: {sorted(ESTIMATORS)}")
    return factory(dataset, config)


# ---------------------------------------------------------------------------
# model persistence: a directory with a JSON manifest plus binary blobs


def _save_array(path, arr):
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _load_array(path, shape):
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").copy().reshape(shape)


def _spec_dict(spec: NetworkSpec) -> dict:
    return dataclasses.asdict(spec)


def save_model(model, dirpath) -> None:
    """Persist any fitted estimator to a directory.

    The manifest records the estimator kind, network spec, hyperparameters,
    and seed; weights go into little-endian binary blobs next to it.
    """
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    meta: dict = {"kind": type(model).__name__}
    if isinstance(model, PointModel):
        meta["spec"] = _spec_dict(model.spec)
        model.params.save(d / "params.bin")
    elif isinstance(model, EnsembleModel):
        meta.update(spec=_spec_dict(model.spec), ensemble_kind=model.kind,
                    n_members=len(model.members), lam=model.lam)
        for i, m in enumerate(model.members):
            m.save(d / f"member_{i}.bin")
        if model.anchors is not None:
            for i, a in enumerate(model.anchors):
                a.save(d / f"anchor_{i}.bin")
    elif isinstance(model, McDropoutPredictor):
        meta.update(spec=_spec_dict(model.spec), n_samples=model.n_samples,
                    frozen=model.frozen, seed=model.seed)
        model.params.save(d / "params.bin")
    elif isinstance(model, SwagModel):
        meta.update(spec=_spec_dict(model.spec), snapshots_kept=model.snapshots_kept,
                    sgd_lr=model.sgd_lr, n_samples=model.n_samples, seed=model.seed)
        model.mean_weights.save(d / "mean.bin")
        _save_array(d / "weight_variance.bin", model.weight_variance)
    elif isinstance(model, LaplaceModel):
        meta.update(spec=_spec_dict(model.spec), noise_var=model.noise_var,
                    n_params=model.spec.n_params)
        model.map_weights.save(d / "map.bin")
        _save_array(d / "covariance.bin", model.covariance)
    elif isinstance(model, MllvModel):
        meta["spec"] = _spec_dict(model.spec)
        model.params.save(d / "params.bin")
    elif isinstance(model, DeupModel):
        meta["spec"] = _spec_dict(model.spec)
        model.mean_params.save(d / "mean_params.bin")
        model.variance_params.save(d / "variance_params.bin")
    elif isinstance(model, DadeeModel):
        meta["variance_spec"] = _spec_dict(model.variance_spec)
        save_model(model.ensemble, d / "ensemble")
        model.variance_params.save(d / "variance_params.bin")
    elif isinstance(model, GpPredictor):
        gp = model.model
        meta.update(kernel=dataclasses.asdict(gp.kernel),
                    n_train=gp.train_inputs.shape[0],
                    d_in=gp.train_inputs.shape[1],
                    d_out=gp.train_targets.shape[1])
        _save_array(d / "train_inputs.bin", gp.train_inputs)
        _save_array(d / "train_targets.bin", gp.train_targets)
        _save_array(d / "cholesky.bin", gp.cholesky_factor)
        _save_array(d / "alpha.bin", gp.alpha)
    else:
        raise TypeError(f"cannot save model of type {type(model).__name__}")
    (d / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_model(dirpath):
    d = Path(dirpath)
    meta = json.loads((d / "manifest.json").read_text())
    kind = meta["kind"]
    spec = NetworkSpec(**meta["spec"]) if "spec" in meta else None
    if kind == "PointModel":
        return PointModel(ParamVector.load(d / "params.bin"), spec)
    if kind == "EnsembleModel":
        members = [ParamVector.load(d / f"member_{i}.bin")
                   for i in range(meta["n_members"])]
        anchors = None
        if (d / "anchor_0.bin").exists():
            anchors = [ParamVector.load(d / f"anchor_{i}.bin")
                       for i in range(meta["n_members"])]
        return EnsembleModel(members, spec, meta["ensemble_kind"],
                             anchors=anchors, lam=meta["lam"])
    if kind == "McDropoutPredictor":
        return McDropoutPredictor(ParamVector.load(d / "params.bin"), spec,
                                  n_samples=meta["n_samples"],
                                  frozen=meta["frozen"], seed=meta["seed"])
    if kind == "SwagModel":
        mean = ParamVector.load(d / "mean.bin")
        var = _load_array(d / "weight_variance.bin", (len(mean.values),))
        return SwagModel(mean, var, spec, meta["snapshots_kept"],
                         meta["sgd_lr"], meta["n_samples"], meta["seed"])
    if kind == "LaplaceModel":
        n = meta["n_params"]
        return LaplaceModel(ParamVector.load(d / "map.bin"),
                            _load_array(d / "covariance.bin", (n, n)),
                            spec, meta["noise_var"])
    if kind == "MllvModel":
        return MllvModel(ParamVector.load(d / "params.bin"), spec)
    if kind == "DeupModel":
        return DeupModel(ParamVector.load(d / "mean_params.bin"),
                         ParamVector.load(d / "variance_params.bin"), spec)
    if kind == "DadeeModel":
        return DadeeModel(load_model(d / "ensemble"),
                          ParamVector.load(d / "variance_params.bin"),
                          NetworkSpec(**meta["variance_spec"]))
    if kind == "GpPredictor":
        from .gp import RbfKernel
        xi = _load_array(d / "train_inputs.bin", (meta["n_train"], meta["d_in"]))
        yi = _load_array(d / "train_targets.bin", (meta["n_train"], meta["d_out"]))
        chol = _load_array(d / "cholesky.bin", (meta["n_train"], meta["n_train"]))
        alpha = _load_array(d / "alpha.bin", (meta["n_train"], meta["d_out"]))
        return GpPredictor(GpModel(xi, yi, RbfKernel(**meta["kernel"]), chol, alpha))
    raise ValueError(f"unknown saved model kind {kind!r}")
