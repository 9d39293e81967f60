"""Sample-based distribution distances."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_PROJECTIONS = 512


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    n_projections: int | None = None
    seed: int | None = None

    def as_row(self) -> dict:
        return asdict(self)


def _flat_1d(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 1:
        raise ConfigError(f"{name} must be one-dimensional samples, got shape {x.shape}")
    if x.size == 0:
        raise ConfigError(f"{name} is empty")
    return x


def _quantiles(sorted_x, n):
    """Inverse empirical CDF of ``sorted_x`` at the mid-point levels (i + 0.5) / n."""
    m = len(sorted_x)
    if m == n:
        return sorted_x
    levels = (np.arange(n) + 0.5) / n
    return np.interp(levels * m - 0.5, np.arange(m), sorted_x)


def _sorted_pair(a, b):
    a, b = np.sort(a), np.sort(b)
    n = max(len(a), len(b))
    return _quantiles(a, n), _quantiles(b, n)


def wasserstein1_1d(a, b) -> float:
    """Exact 1D W1 for equal sample counts (mean gap of order statistics).

    Unequal counts are put on a common quantile grid by linear
    interpolation of each empirical inverse CDF.
    """
    qa, qb = _sorted_pair(_flat_1d(a, "a"), _flat_1d(b, "b"))
    return float(np.mean(np.abs(qa - qb)))


def random_directions(n_proj: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n_proj < 1:
        raise ConfigError(f"n_proj must be >= 1, got {n_proj}")
    if dim == 2:
        theta = rng.uniform(0.0, 2 * np.pi, size=n_proj)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    d = rng.standard_normal((n_proj, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_w2(a, b, n_proj: int = DEFAULT_PROJECTIONS, rng: np.random.Generator | None = None,
              directions: np.ndarray | None = None) -> float:
    """sqrt of the mean over random unit directions of the squared 1D W2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ConfigError("sliced_w2 needs non-empty sample sets")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"incompatible sample shapes {a.shape} and {b.shape}")
    if directions is None:
        directions = random_directions(n_proj, a.shape[1], rng if rng is not None else np.random.default_rng(0))
    total = 0.0
    for d in directions:
        qa, qb = _sorted_pair(a @ d, b @ d)
        total += np.mean((qa - qb) ** 2)
    return float(np.sqrt(total / len(directions)))


def histogram(samples, bins: int, range: tuple[float, float]):
    """Density-normalised histogram; returns ``(density, edges)``."""
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    density, edges = np.histogram(np.asarray(samples, dtype=np.float64).reshape(-1), bins=bins,
                                  range=range, density=True)
    return density, edges


def distance(a, b, metric: str = "auto", n_proj: int = DEFAULT_PROJECTIONS, seed: int = 0) -> MetricReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if metric == "auto":
        metric = "w1" if a.shape[1] == 1 else "sw2"
    if metric == "w1":
        return MetricReport("w1", wasserstein1_1d(a, b), len(a), None, seed)
    if metric == "sw2":
        value = sliced_w2(a, b, n_proj, np.random.default_rng(seed))
        return MetricReport("sw2", value, len(a), n_proj, seed)
    raise ConfigError(f"unknown metric {metric!r}")
