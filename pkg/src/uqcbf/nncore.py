"""Minimal feed-forward networks with exact reverse-mode gradients.

Everything operates on flat parameter vectors so that ensembles, SWAG
snapshots, Laplace covariances, and anchored regularizers can treat the
weights as plain numpy arrays.  Hidden layers use tanh; the output layer
is linear.  Dropout follows the inverted convention (activations scaled
by 1/(1-rate) at train time, nothing at inference).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOFTPLUS_FLOOR = 1e-6


class DimensionError(ValueError):
    """Shape mismatch between parameters, spec, or data."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_units: int
    activation: str = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_layers, self.hidden_units) < 1:
            raise ValueError("all network dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in self.layer_dims)


@dataclass
class ParamVector:
    values: np.ndarray
    shapes: list[tuple[int, int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = sum((n_in + 1) * n_out for n_in, n_out in self.shapes)
        if self.values.shape != (expected,):
            raise DimensionError(
                f"flat length {self.values.shape} does not match shapes (need {expected})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.shapes))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Unpack into (weight, bias) pairs; weight is (n_in, n_out)."""
        out = []
        offset = 0
        for n_in, n_out in self.shapes:
            w = self.values[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = self.values[offset : offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.values.astype("<f8").tobytes())
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps({"shapes": self.shapes}))

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        shapes = [tuple(s) for s in sidecar["shapes"]]
        values = np.frombuffer(path.read_bytes(), dtype="<f8").copy()
        return cls(values, shapes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 20
    seed: int = 0
    l2_anchor: tuple[float, "ParamVector"] | None = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError("inputs and targets disagree on row count")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def save_csv(self, path: str | Path) -> None:
        k, m = self.inputs.shape[1], self.targets.shape[1]
        header = ",".join([f"x{i}" for i in range(k)] + [f"y{i}" for i in range(m)])
        data = np.hstack([self.inputs, self.targets])
        np.savetxt(path, data, delimiter=",", header=header, comments="")

    @classmethod
    def load_csv(cls, path: str | Path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        n_in = sum(1 for c in header if c.startswith("x"))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :n_in], data[:, n_in:])


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights (scale sqrt(6/(fan_in+fan_out))), zero biases."""
    chunks = []
    for n_in, n_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ParamVector(np.concatenate(chunks), spec.layer_dims)


def sample_prior(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Draw from the init prior; used for anchor weights."""
    return init_params(spec, rng)


def sample_dropout_masks(spec: NetworkSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """One keep-mask (0/1 floats) per hidden layer."""
    rate = spec.dropout_rate
    return [
        (rng.random(spec.hidden_units) >= rate).astype(float)
        for _ in range(spec.hidden_layers)
    ]


def _forward_cached(params: ParamVector, spec: NetworkSpec, x: np.ndarray,
                    masks=None):
    """Batched forward pass keeping activations for backprop.

    Returns (output N x d_out, cache).  `masks` is a per-hidden-layer list of
    keep masks, each either (hidden_units,) shared across the batch or
    (N, hidden_units).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"input width {x.shape[1]} != input_dim {spec.input_dim}")
    layers = params.layers()
    keep = 1.0 - spec.dropout_rate
    hs = [x]  # post-activation (and post-mask) values entering each layer
    h = x
    for li, (w, b) in enumerate(layers[:-1]):
        z = h @ w + b
        a = np.tanh(z)
        if masks is not None:
            a = a * masks[li] / keep
        hs.append(a)
        h = a
    w, b = layers[-1]
    y = h @ w + b
    cache = (x, hs, layers, masks, keep)
    return y, cache


def forward(params: ParamVector, spec: NetworkSpec, x: np.ndarray, masks=None) -> np.ndarray:
    """Network output for a batch (N, d_in) -> (N, d_out); 1-D input allowed."""
    single = np.asarray(x).ndim == 1
    y, _ = _forward_cached(params, spec, x, masks)
    return y[0] if single else y


def backprop(cache, dLdY: np.ndarray) -> np.ndarray:
    """Flat gradient of a scalar loss given dL/d(output)."""
    x, hs, layers, masks, keep = cache
    grads_w = [None] * len(layers)
    grads_b = [None] * len(layers)
    delta = dLdY
    w_out, _ = layers[-1]
    grads_w[-1] = hs[-1].T @ delta
    grads_b[-1] = delta.sum(axis=0)
    upstream = delta @ w_out.T
    for li in range(len(layers) - 2, -1, -1):
        a = hs[li + 1]
        if masks is not None:
            # a already includes mask/keep scaling; recover tanh value for the
            # derivative on kept units
            mask = np.broadcast_to(masks[li], a.shape)
            tanh_val = a * keep  # undo 1/keep; zeros stay zero
            dz = upstream * mask / keep * (1.0 - tanh_val ** 2)
        else:
            dz = upstream * (1.0 - a ** 2)
        w, _ = layers[li]
        grads_w[li] = hs[li].T @ dz
        grads_b[li] = dz.sum(axis=0)
        upstream = dz @ w.T
    flat = []
    for gw, gb in zip(grads_w, grads_b):
        flat.append(gw.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def softplus_var(z: np.ndarray) -> np.ndarray:
    """Nonnegative variance link: softplus plus a small floor."""
    return softplus(z) + SOFTPLUS_FLOOR


def softplus_inverse(y: float) -> float:
    """Raw pre-link value whose softplus is y (y > 0)."""
    if y <= 0:
        raise ValueError("softplus is positive")
    return float(np.log(np.expm1(y))) if y < 30 else float(y)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def backward(params: ParamVector, spec: NetworkSpec, x: np.ndarray, y: np.ndarray,
             loss: str = "mse", anchor: ParamVector | None = None,
             anchor_weight: float = 0.0, n_data: int | None = None,
             masks=None) -> tuple[np.ndarray, float]:
    """Loss value and flat analytic gradient for one batch.

    Losses:
      mse           mean over the batch of the summed squared error.
      anchored_mse  mse plus (anchor_weight/n_data) * ||params - anchor||^2.
      mllv_nll      Gaussian NLL with mean and raw-variance output channels;
                    the variance channel goes through softplus + floor.

    `n_data` is the full-dataset size the anchored regularizer is scaled by
    (defaults to the batch size).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = x.shape[0]
    out, cache = _forward_cached(params, spec, x, masks)
    if loss in ("mse", "anchored_mse"):
        if out.shape != y.shape:
            raise DimensionError("target width does not match network output")
        resid = out - y
        value = float(np.sum(resid ** 2) / n)
        grad = backprop(cache, 2.0 * resid / n)
        if loss == "anchored_mse":
            if anchor is None:
                raise ValueError("anchored_mse requires an anchor")
            scale = anchor_weight / float(n_data if n_data else n)
            diff = params.values - anchor.values
            value += float(scale * np.sum(diff ** 2))
            grad = grad + 2.0 * scale * diff
    elif loss == "mllv_nll":
        d = y.shape[1]
        if out.shape[1] != 2 * d:
            raise DimensionError("mllv_nll needs output_dim = 2 * target_dim")
        mu, raw = out[:, :d], out[:, d:]
        var = softplus_var(raw)
        resid = mu - y
        per_term = 0.5 * np.log(var) + resid ** 2 / (2.0 * var)
        value = float(np.sum(per_term) / n)
        dmu = resid / var / n
        dvar = (0.5 / var - resid ** 2 / (2.0 * var ** 2)) / n
        draw = dvar * _sigmoid(raw)
        grad = backprop(cache, np.hstack([dmu, draw]))
    elif loss == "softplus_mse":
        if out.shape != y.shape:
            raise DimensionError("target width does not match network output")
        pred = softplus_var(out)
        resid = pred - y
        value = float(np.sum(resid ** 2) / n)
        grad = backprop(cache, 2.0 * resid * _sigmoid(out) / n)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not np.isfinite(value):
        bad = int(np.argmax(~np.isfinite(np.sum(out, axis=1))))
        raise DivergenceError(f"non-finite loss on batch (first bad row {bad})",
                              batch_index=bad)
    return grad, value


def train(dataset: Dataset, spec: NetworkSpec, config: TrainConfig,
          loss: str = "mse", init: ParamVector | None = None,
          use_dropout: bool | None = None) -> tuple[ParamVector, list[float]]:
    """Plain mini-batch SGD.  Returns final weights and per-epoch mean loss.

    Reproducible: init, shuffling, and dropout masks all derive from
    config.seed.  Dropout is applied during training whenever the spec has a
    positive rate unless `use_dropout=False`.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(spec, rng)
    anchor = None
    lam = 0.0
    if config.l2_anchor is not None:
        lam, anchor = config.l2_anchor
    dropout = spec.dropout_rate > 0 if use_dropout is None else use_dropout
    n = len(dataset)
    batch = min(config.batch_size, n)
    # exact proximal step for the anchor quadratic; stable for any lambda
    prox = 2.0 * config.learning_rate * lam / n if anchor is not None else 0.0
    adam = config.optimizer == "adam"
    if adam:
        m1 = np.zeros_like(params.values)
        m2 = np.zeros_like(params.values)
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb, yb = dataset.inputs[idx], dataset.targets[idx]
            masks = None
            if dropout:
                masks = [
                    (rng.random((len(idx), spec.hidden_units)) >= spec.dropout_rate).astype(float)
                    for _ in range(spec.hidden_layers)
                ]
            try:
                grad, value = backward(params, spec, xb, yb, loss, masks=masks)
            except DivergenceError as err:
                raise DivergenceError(f"training diverged at epoch {epoch}",
                                      epoch=epoch, batch_index=err.batch_index) from err
            if anchor is not None:
                value += lam / n * float(np.sum((params.values - anchor.values) ** 2))
            if adam:
                step += 1
                m1 = b1 * m1 + (1 - b1) * grad
                m2 = b2 * m2 + (1 - b2) * grad ** 2
                m1_hat = m1 / (1 - b1 ** step)
                m2_hat = m2 / (1 - b2 ** step)
                params.values -= config.learning_rate * m1_hat / (np.sqrt(m2_hat) + eps)
            else:
                params.values -= config.learning_rate * grad
            if prox:
                params.values += prox * anchor.values
                params.values /= 1.0 + prox
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))
    return params, trace
