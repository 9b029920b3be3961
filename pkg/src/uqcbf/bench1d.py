"""1-D regression benchmark: cubic with uniform noise, in/OOD splits, sweeps.

Training inputs are sampled uniformly over a union of intervals; test inputs
are a deterministic equispaced grid so that plot data and domain labels are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import ESTIMATORS, fit_estimator
from .metrics import IN_DOMAIN, OOD, EvalSplit, MetricReport, report
from .nncore import Dataset, TrainConfig

DEFAULT_TRAIN_INTERVALS = ((-2.5, -0.75), (0.75, 2.5))


def target_fn(x: np.ndarray) -> np.ndarray:
    return x ** 3 / 5.0 - x


@dataclass(frozen=True)
class Bench1dConfig:
    n_train: int = 513
    n_test: int = 1000
    train_intervals: tuple = DEFAULT_TRAIN_INTERVALS
    test_domain: tuple = (-3.0, 3.0)
    noise_half_width: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_half_width <= 0:
            raise ValueError("noise half-width must be positive")
        lo, hi = self.test_domain
        for a, b in self.train_intervals:
            if not (lo <= a < b <= hi):
                raise ValueError("train intervals must be inside the test domain")


def in_train_domain(x: np.ndarray, config: Bench1dConfig) -> np.ndarray:
    x = np.asarray(x)
    mask = np.zeros(x.shape, dtype=bool)
    for a, b in config.train_intervals:
        mask |= (x >= a) & (x <= b)
    return mask


def generate(config: Bench1dConfig) -> tuple[Dataset, EvalSplit]:
    """Noisy training data over the interval union, labeled equispaced test grid."""
    rng = np.random.default_rng(config.seed)
    lengths = np.array([b - a for a, b in config.train_intervals], dtype=float)
    probs = lengths / lengths.sum()
    choice = rng.choice(len(lengths), size=config.n_train, p=probs)
    u = rng.random(config.n_train)
    xs = np.array([config.train_intervals[c][0] + u_i * lengths[c]
                   for c, u_i in zip(choice, u)])
    noise = rng.uniform(-config.noise_half_width, config.noise_half_width,
                        size=config.n_train)
    train = Dataset(xs[:, None], (target_fn(xs) + noise)[:, None])

    xt = np.linspace(config.test_domain[0], config.test_domain[1], config.n_test)
    noise_t = rng.uniform(-config.noise_half_width, config.noise_half_width,
                          size=config.n_test)
    labels = np.where(in_train_domain(xt, config), IN_DOMAIN, OOD)
    test = EvalSplit(xt[:, None], (target_fn(xt) + noise_t)[:, None], labels)
    return train, test


def run_sweep(config: Bench1dConfig, estimator_names: list[str],
              train_config: TrainConfig) -> list[MetricReport | dict]:
    """One MetricReport per estimator; a failure becomes an error row."""
    train, test = generate(config)
    rows = []
    for name in estimator_names:
        try:
            rows.append(report(
                name,
                lambda data, n=name: fit_estimator(n, data, train_config),
                train, test, seed=train_config.seed))
        except Exception as err:  # keep the sweep alive
            rows.append({"estimator": name, "error": f"{type(err).__name__}: {err}"})
    return rows


def sweep_csv(rows, include_header: bool = True) -> str:
    lines = []
    if include_header:
        lines.append(",".join(MetricReport.CSV_COLUMNS))
    for row in rows:
        if isinstance(row, MetricReport):
            lines.append(row.to_csv_row())
        else:
            lines.append(f"{row['estimator']},error: {row['error']}")
    return "\n".join(lines) + "\n"


def mean_in_domain_variance(predictor, config: Bench1dConfig,
                            n_probe: int = 400) -> float:
    """Average predicted variance over an equispaced in-domain probe grid."""
    xs = np.linspace(config.test_domain[0], config.test_domain[1], n_probe)
    xs = xs[in_train_domain(xs, config)]
    return float(predictor.predict(xs[:, None]).variance.mean())


def shrinkage_study(config: Bench1dConfig, estimator_name: str,
                    train_config: TrainConfig,
                    factors: tuple[int, ...] = (1, 2, 4, 8)) -> list[tuple[int, float]]:
    """Mean in-domain variance vs dataset duplication factor."""
    base_train, _ = generate(config)
    series = []
    for factor in factors:
        data = Dataset(np.tile(base_train.inputs, (factor, 1)),
                       np.tile(base_train.targets, (factor, 1)))
        predictor = fit_estimator(estimator_name, data, train_config)
        series.append((factor, mean_in_domain_variance(predictor, config)))
    return series


def prediction_curves(predictor, config: Bench1dConfig, n_points: int = 400):
    """(x, mean, variance, region) rows for external plotting."""
    xs = np.linspace(config.test_domain[0], config.test_domain[1], n_points)
    pred = predictor.predict(xs[:, None])
    regions = np.where(in_train_domain(xs, config), IN_DOMAIN, OOD)
    return [(float(x), float(m), float(v), r)
            for x, m, v, r in zip(xs, pred.mean[:, 0], pred.variance[:, 0], regions)]
