"""Scoring of posterior predictions: MSE, MSLL, RMSCE, and variance sensitivity.

All scores add a fixed epsilon (0.01) to predicted variances so that point
predictors with zero variance stay finite.  Multi-output targets are scored
per output dimension and averaged.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import ndtr

VARIANCE_EPS = 0.01
COVERAGE_GRID = np.round(np.arange(0, 101) * 0.01, 2)

IN_DOMAIN = "in_domain"
OOD = "ood"


@dataclass
class EvalSplit:
    inputs: np.ndarray
    targets: np.ndarray
    region_labels: np.ndarray  # per-row, values in {"in_domain", "ood"}

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        self.region_labels = np.asarray(self.region_labels)
        if not (len(self.inputs) == len(self.targets) == len(self.region_labels)):
            raise ValueError("rows of inputs, targets, labels must match")
        bad = set(self.region_labels) - {IN_DOMAIN, OOD}
        if bad:
            raise ValueError(f"unknown region labels: {bad}")

    @property
    def in_mask(self) -> np.ndarray:
        return self.region_labels == IN_DOMAIN


@dataclass
class MetricReport:
    estimator: str
    mse: float
    msll: float
    msll_in: float
    msll_ood: float
    rmsce: float
    rmsce_in: float
    rmsce_ood: float
    sensitivity: float
    train_time_s: float
    infer_time_s: float
    seed: int = 0

    CSV_COLUMNS = ("estimator", "train_time_s", "infer_time_s", "mse",
                   "msll", "msll_in", "msll_ood",
                   "rmsce", "rmsce_in", "rmsce_ood", "sensitivity", "seed")
    TIMING_COLUMNS = ("train_time_s", "infer_time_s")

    def to_csv_row(self) -> str:
        vals = []
        for c in self.CSV_COLUMNS:
            v = getattr(self, c)
            vals.append(v if isinstance(v, str) else repr(v))
        return ",".join(str(v) for v in vals)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _effective_variance(variance: np.ndarray) -> np.ndarray:
    return np.asarray(variance, dtype=float) + VARIANCE_EPS


def msll(mean: np.ndarray, variance: np.ndarray, targets: np.ndarray) -> float:
    """Mean standardized log loss under Gaussian predictive distributions."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    var = _effective_variance(np.atleast_2d(variance))
    if mean.shape != targets.shape:
        raise ValueError("mean and target shapes differ")
    terms = 0.5 * np.log(2 * np.pi * var) + (targets - mean) ** 2 / (2 * var)
    return float(np.mean(np.mean(terms, axis=0)))


def rmsce(mean: np.ndarray, variance: np.ndarray, targets: np.ndarray,
          grid: np.ndarray = COVERAGE_GRID) -> float:
    """Root-mean-square gap between nominal and empirical coverage.

    Coverage of the central Gaussian prediction interval: a target counts as
    covered at level p when its two-sided tail probability under the
    (epsilon-floored) predictive Gaussian is at most p.  A perfectly
    calibrated predictor covers exactly a p fraction at every level.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    var = _effective_variance(np.atleast_2d(variance))
    if mean.size == 0:
        raise ValueError("empty evaluation set")
    z = np.abs(targets - mean) / np.sqrt(var)
    central = 1.0 - 2.0 * ndtr(-z)  # smallest central interval containing y
    per_dim = []
    for d in range(central.shape[1]):
        emp = np.mean(central[:, d][None, :] <= grid[:, None], axis=1)
        per_dim.append(np.sqrt(np.mean((grid - emp) ** 2)))
    return float(np.mean(per_dim))


def sensitivity(predictor, probe_inputs: np.ndarray, dx: float = 1e-3) -> float:
    """Summed absolute variance slope |Var(x+dx) - Var(x)| / dx over probes.

    The perturbation is applied to every input coordinate at once; predictors
    with stochastic inference (fresh-mask dropout) are probed with two
    separate calls, so their internal randomness contributes to the score.
    """
    if dx <= 0:
        raise ValueError("dx must be positive")
    probes = np.atleast_2d(np.asarray(probe_inputs, dtype=float))
    base = predictor.predict(probes).variance
    shifted = predictor.predict(probes + dx).variance
    per_point = np.abs(shifted - base).mean(axis=1)
    return float(np.sum(per_point) / dx)


def report(name: str, fit_fn, train_data, eval_split: EvalSplit,
           seed: int = 0, sensitivity_dx: float = 1e-3) -> MetricReport:
    """Fit (timed), batch-predict (timed), and score one estimator."""
    t0 = time.monotonic()
    predictor = fit_fn(train_data)
    train_time = time.monotonic() - t0
    t0 = time.monotonic()
    pred = predictor.predict(eval_split.inputs)
    infer_time = time.monotonic() - t0
    mean, var, y = pred.mean, pred.variance, eval_split.targets
    mask = eval_split.in_mask
    return MetricReport(
        estimator=name,
        mse=float(np.mean((mean - y) ** 2)),
        msll=msll(mean, var, y),
        msll_in=msll(mean[mask], var[mask], y[mask]),
        msll_ood=msll(mean[~mask], var[~mask], y[~mask]),
        rmsce=rmsce(mean, var, y),
        rmsce_in=rmsce(mean[mask], var[mask], y[mask]),
        rmsce_ood=rmsce(mean[~mask], var[~mask], y[~mask]),
        sensitivity=sensitivity(predictor, eval_split.inputs, sensitivity_dx),
        train_time_s=train_time,
        infer_time_s=infer_time,
        seed=seed,
    )
