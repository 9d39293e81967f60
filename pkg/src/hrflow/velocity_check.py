"""Compare the closed-form velocity distribution with conditional Monte Carlo.

The Monte Carlo side never touches the closed form: it samples pairs
``(X0, X1)`` from the source and target exactly conditioned on the
interpolant ``X_t`` landing in a window ``[x_t - w/2, x_t + w/2]`` and
histograms ``V = X1 - X0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .distributions import GaussianMixture, VelocityLaw
from .errors import ConfigError, UndefinedRegionError


def _truncated_std_normal(a, b, rng):
    """Standard normal draws restricted to ``[a, b]`` (elementwise) by inverse CDF.

    Intervals on the positive side are mirrored so the CDF is evaluated in the
    accurate lower tail.
    """
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    pa, pb = ndtr(lo), ndtr(hi)
    x = ndtri(pa + rng.random(np.shape(a)) * (pb - pa))
    x = np.clip(x, lo, hi)
    return np.where(flip, -x, x)


def _truncated_mixture(target: GaussianMixture, lo: float, hi: float, n: int, rng):
    """Draws from a 1D mixture restricted to ``[lo, hi]``."""
    mu, sd = target.means[:, 0], target.stds[:, 0]
    a, b = (lo - mu) / sd, (hi - mu) / sd
    mass = target.weights * (ndtr(b) - ndtr(a))
    if mass.sum() <= 0:
        raise UndefinedRegionError("target puts no mass in the window")
    k = rng.choice(len(mu), size=n, p=mass / mass.sum())
    return mu[k] + sd[k] * _truncated_std_normal(a[k], b[k], rng)


def conditional_velocity_samples(target: GaussianMixture, x_t: float, t: float, n: int,
                                 rng: np.random.Generator, window: float = 0.01,
                                 chunk: int = 1_000_000) -> np.ndarray:
    """``n`` exact draws of ``X1 - X0`` given ``|(1-t) X0 + t X1 - x_t| <= window/2``.

    ``X0 ~ N(0, 1)`` and ``X1 ~ target`` are independent (1D).  For ``t < 1``,
    ``X1`` is drawn from the target and accepted with probability
    proportional to ``P(X_t in window | X1)``; ``X0`` is then drawn from the
    truncated normal that puts ``X_t`` in the window.  At ``t = 1`` the window
    constrains ``X1`` alone.
    """
    if target.dim != 1:
        raise ConfigError("the conditional sampler is one-dimensional")
    lo, hi = x_t - window / 2, x_t + window / 2
    if t == 1.0:
        x1 = _truncated_mixture(target, lo, hi, n, rng)
        return x1 - rng.standard_normal(n)
    scale = 1.0 - t
    half = window / (2 * scale)
    p_max = 2 * ndtr(half) - 1
    out = []
    have = 0
    while have < n:
        x1 = target.sample(chunk, rng)[:, 0]
        a = (lo - t * x1) / scale
        b = (hi - t * x1) / scale
        p = ndtr(b) - ndtr(a)
        keep = rng.random(chunk) * p_max < p
        x1, a, b = x1[keep], a[keep], b[keep]
        if len(x1) == 0:
            continue
        x0 = _truncated_std_normal(a, b, rng)
        out.append(x1 - x0)
        have += len(x1)
    return np.concatenate(out)[:n]


@dataclass
class VelocityCheck:
    x_t: float
    t: float
    centers: np.ndarray
    analytic: np.ndarray
    empirical: np.ndarray
    l1: float
    n_samples: int
    status: str = "ok"


def check_point(law: VelocityLaw, x_t: float, t: float, n_samples: int, rng: np.random.Generator,
                window: float = 0.01, v_range=(-6.0, 6.0), bins: int = 240) -> VelocityCheck:
    """L1 distance between the analytic pdf and a density histogram.

    The analytic side uses exact bin masses (CDF differences), and the mass
    that falls outside ``v_range`` counts toward the distance for both sides.
    """
    src = law.source
    if src.dim != 1 or src.n_components != 1 or src.means[0, 0] != 0.0 or src.stds[0, 0] != 1.0:
        raise ConfigError("velocity check needs a 1D standard Gaussian source")
    target = law.target.to_mixture()
    edges = np.linspace(v_range[0], v_range[1], bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)
    try:
        cdf = law.velocity_cdf(edges, np.array([[x_t]]), t)
    except UndefinedRegionError:
        nan = np.full(bins, np.nan)
        return VelocityCheck(x_t, t, centers, nan, nan, float("nan"), 0, "undefined")
    cdf = np.asarray(cdf).reshape(-1)
    analytic = np.diff(cdf) / width
    samples = conditional_velocity_samples(target, x_t, t, n_samples, rng, window)
    counts, _ = np.histogram(samples, bins=edges)
    empirical = counts / (n_samples * width)
    outside_emp = 1.0 - counts.sum() / n_samples
    outside_an = 1.0 - (cdf[-1] - cdf[0])
    l1 = float(np.sum(np.abs(empirical - analytic) * width) + abs(outside_emp - outside_an))
    return VelocityCheck(x_t, t, centers, analytic, empirical, l1, n_samples)


def write_curves_csv(path, checks: list[VelocityCheck]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "x_t", "t", "v", "analytic_pdf", "histogram_density"])
        for i, c in enumerate(checks):
            for v, a, e in zip(c.centers, c.analytic, c.empirical):
                w.writerow([i, repr(c.x_t), repr(c.t), repr(float(v)), repr(float(a)), repr(float(e))])


def write_l1_csv(path, checks: list[VelocityCheck]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "x_t", "t", "l1", "n_samples", "status"])
        for i, c in enumerate(checks):
            w.writerow([i, repr(c.x_t), repr(c.t), repr(c.l1), c.n_samples, c.status])
