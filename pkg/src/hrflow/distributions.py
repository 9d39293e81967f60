"""Source/target distributions and closed-form velocity-distribution oracles.

Every distribution used by the experiments is either a diagonal Gaussian
mixture (standard Gaussian and the Gaussian ring are special cases) or the
two-moons point cloud, which has no closed-form density.

For a Gaussian-mixture source and target, the interpolant
``X_t = (1 - t) X_0 + t X_1`` and the velocity ``V = X_1 - X_0`` are jointly
Gaussian within each (source component, target component) pair, so the
marginal of ``X_t`` and the law of ``V`` given ``X_t`` are Gaussian mixtures
with closed-form parameters.  :class:`VelocityLaw` implements exactly that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, ClassVar

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, UndefinedRegionError, UnsupportedDensityError

LOG_2PI = math.log(2 * math.pi)
DENSITY_FLOOR = 1e-300


def _as_points(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, dim) if dim == 1 else x.reshape(1, dim)
    if x.shape[-1] != dim:
        raise ConfigError(f"points have dimension {x.shape[-1]}, expected {dim}")
    return x


def diag_normal_logpdf(x, mean, std):
    """log N(x; mean, diag(std^2)) summed over the trailing axis."""
    z = (x - mean) / std
    return -0.5 * np.sum(z * z + 2 * np.log(std) + LOG_2PI, axis=-1)


# --------------------------------------------------------------------------
# distribution specs

class DistributionSpec:
    kind: ClassVar[str]
    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_mixture(self) -> "GaussianMixture":
        raise UnsupportedDensityError(f"{self.kind} has no closed-form density")

    def log_density(self, x) -> np.ndarray:
        return self.to_mixture().log_density(x)

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class StandardGaussian(DistributionSpec):
    kind: ClassVar[str] = "standard_gaussian"
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")

    def sample(self, n, rng):
        return rng.standard_normal((n, self.dim))

    def to_mixture(self):
        return GaussianMixture([1.0], np.zeros((1, self.dim)), np.ones((1, self.dim)))

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim}


class GaussianMixture(DistributionSpec):
    """Diagonal-covariance Gaussian mixture with ``K`` components."""

    kind: ClassVar[str] = "gaussian_mixture"

    def __init__(self, weights, means, stds):
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        sd = np.broadcast_to(np.asarray(stds, dtype=np.float64).reshape(len(w), -1), mu.shape).copy()
        if mu.shape[0] != len(w):
            raise ConfigError("weights and means disagree on the number of components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be >= 0 and sum to 1, got {w}")
        if np.any(sd <= 0):
            raise ConfigError("component stds must be positive")
        if mu.shape[1] not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {mu.shape[1]}")
        self.weights, self.means, self.stds = w, mu, sd

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def __eq__(self, other):
        return (isinstance(other, GaussianMixture) and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means) and np.array_equal(self.stds, other.stds))

    def __repr__(self):
        return f"GaussianMixture(weights={self.weights.tolist()}, means={self.means.tolist()}, stds={self.stds.tolist()})"

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + self.stds[comp] * rng.standard_normal((n, self.dim))

    def to_mixture(self):
        return self

    def component_logpdf(self, x):
        """(N, K) array of log w_k + log N(x; mu_k, sigma_k^2)."""
        x = _as_points(x, self.dim)
        return np.log(self.weights) + diag_normal_logpdf(x[:, None, :], self.means, self.stds)

    def log_density(self, x):
        return logsumexp(self.component_logpdf(x), axis=1)

    def cdf(self, x):
        """Mixture CDF, 1D only."""
        from scipy.stats import norm
        if self.dim != 1:
            raise ConfigError("cdf is only defined for 1D mixtures")
        x = np.asarray(x, dtype=np.float64)[..., None]
        return np.sum(self.weights * norm.cdf(x, self.means[:, 0], self.stds[:, 0]), axis=-1)

    def mean(self):
        return self.weights @ self.means

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist(),
                "means": self.means.tolist(), "stds": self.stds.tolist()}


@dataclass(frozen=True)
class GaussianRing(DistributionSpec):
    """``count`` isotropic Gaussians with means equally spaced on a circle."""

    kind: ClassVar[str] = "gaussian_ring"
    count: int = 8
    radius: float = 8.0
    component_std: float = 0.5

    def __post_init__(self):
        if self.count < 1 or self.radius < 0 or self.component_std <= 0:
            raise ConfigError(f"invalid ring parameters {self}")

    @property
    def dim(self):
        return 2

    def component_means(self):
        angles = 2 * np.pi * np.arange(self.count) / self.count
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def sample(self, n, rng):
        return self.to_mixture().sample(n, rng)

    def to_mixture(self):
        return GaussianMixture(np.full(self.count, 1.0 / self.count), self.component_means(),
                               np.full((self.count, 2), self.component_std))

    def to_dict(self):
        return {"kind": self.kind, "count": self.count, "radius": self.radius,
                "component_std": self.component_std}


@dataclass(frozen=True)
class Moons(DistributionSpec):
    """Two interleaved unit half circles plus isotropic Gaussian noise.

    Upper arc: ``(cos a, sin a)``, lower arc: ``(1 - cos a, 0.5 - sin a)`` for
    ``a ~ U[0, pi]``; each point picks an arc with probability 1/2.
    """

    kind: ClassVar[str] = "moons"
    noise_std: float = 0.1

    @property
    def dim(self):
        return 2

    def sample(self, n, rng):
        a = rng.uniform(0.0, np.pi, size=n)
        lower = rng.random(n) < 0.5
        x = np.where(lower, 1.0 - np.cos(a), np.cos(a))
        y = np.where(lower, 0.5 - np.sin(a), np.sin(a))
        pts = np.stack([x, y], axis=1)
        return pts + self.noise_std * rng.standard_normal((n, 2))

    def to_dict(self):
        return {"kind": self.kind, "noise_std": self.noise_std}


_KINDS = {cls.kind: cls for cls in (StandardGaussian, GaussianMixture, GaussianRing, Moons)}


def spec_from_dict(d: dict) -> DistributionSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown distribution kind {kind!r}; expected one of {sorted(_KINDS)}")
    try:
        return _KINDS[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind}: {exc}") from None


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    return spec.sample(n, rng)


def log_density(spec: DistributionSpec, x) -> np.ndarray:
    return spec.log_density(x)


# --------------------------------------------------------------------------
# velocity distribution

class VelocityLaw:
    """Law of the interpolant and of the velocity given the interpolant.

    Works for any pair of diagonal Gaussian mixtures.  For a standard
    Gaussian source the component parameters are, with
    ``s2 = (1 - t)^2 + t^2 sigma_k^2``:

    * marginal: ``sum_k w_k N(x; t mu_k, s2)``
    * velocity: ``sum_k w~_k N(v; ((1 - t)(mu_k - x) + t sigma_k^2 x) / s2, sigma_k^2 / s2)``
    """

    def __init__(self, source: DistributionSpec, target: DistributionSpec):
        self.source = source.to_mixture()
        self.target = target.to_mixture()
        if self.source.dim != self.target.dim:
            raise ConfigError("source and target dimensions differ")
        # flatten (source component j, target component k) pairs
        J, K = self.source.n_components, self.target.n_components
        self._w = np.outer(self.source.weights, self.target.weights).reshape(J * K)
        self._m0 = np.repeat(self.source.means, K, axis=0)
        self._s0 = np.repeat(self.source.stds, K, axis=0)
        self._m1 = np.tile(self.target.means, (J, 1))
        self._s1 = np.tile(self.target.stds, (J, 1))

    @property
    def dim(self):
        return self.source.dim

    def _pair_params(self, t):
        a = 1.0 - t
        mean_x = a * self._m0 + t * self._m1
        var_x = a * a * self._s0 ** 2 + t * t * self._s1 ** 2
        cov_xv = t * self._s1 ** 2 - a * self._s0 ** 2
        var_v = self._s0 ** 2 + self._s1 ** 2
        return mean_x, var_x, cov_xv, var_v

    def marginal_components(self, t: float):
        """(weights, means, stds) of the interpolant density at time ``t``."""
        _check_time(t)
        mean_x, var_x, _, _ = self._pair_params(t)
        return self._w, mean_x, np.sqrt(var_x)

    def log_marginal(self, x, t: float) -> np.ndarray:
        w, m, s = self.marginal_components(t)
        x = _as_points(x, self.dim)
        return logsumexp(np.log(w) + diag_normal_logpdf(x[:, None, :], m, s), axis=1)

    def marginal_rho_t(self, x, t: float) -> np.ndarray:
        return np.exp(self.log_marginal(x, t))

    def velocity_components(self, x_t, t: float):
        """Per-point mixture parameters of the velocity distribution.

        Returns ``(weights (N, P), means (N, P, dim), stds (P, dim))`` where
        ``P`` is the number of (source, target) component pairs.  Raises
        :class:`UndefinedRegionError` where the marginal density at ``x_t``
        is below 1e-300.
        """
        _check_time(t)
        x = _as_points(x_t, self.dim)
        mean_x, var_x, cov_xv, var_v = self._pair_params(t)
        logw = np.log(self._w) + diag_normal_logpdf(x[:, None, :], mean_x, np.sqrt(var_x))
        log_marg = logsumexp(logw, axis=1, keepdims=True)
        if np.any(log_marg < math.log(DENSITY_FLOOR)):
            bad = x[np.argmin(log_marg[:, 0])]
            raise UndefinedRegionError(f"marginal density at x_t={bad.tolist()}, t={t} is below {DENSITY_FLOOR}")
        weights = np.exp(logw - log_marg)
        gain = cov_xv / var_x
        means = (self._m1 - self._m0) + gain * (x[:, None, :] - mean_x)
        stds = np.sqrt(var_v - gain * cov_xv)
        return weights, means, stds

    def log_velocity_pdf(self, v, x_t, t: float) -> np.ndarray:
        """log pi_1(v; x_t, t); ``v`` and ``x_t`` broadcast row-wise."""
        v = _as_points(v, self.dim)
        x = _as_points(x_t, self.dim)
        weights, means, stds = self.velocity_components(x, t)
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        return logsumexp(logw + diag_normal_logpdf(v[:, None, :], means, stds), axis=1)

    def velocity_pdf(self, v, x_t, t: float) -> np.ndarray:
        return np.exp(self.log_velocity_pdf(v, x_t, t))

    def velocity_cdf(self, v, x_t, t: float) -> np.ndarray:
        """CDF of the 1D velocity distribution at a single ``x_t`` over a grid of ``v``."""
        from scipy.stats import norm
        if self.dim != 1:
            raise ConfigError("velocity_cdf is only defined in 1D")
        weights, means, stds = self.velocity_components(np.atleast_1d(x_t)[:1], t)
        v = np.asarray(v, dtype=np.float64)[..., None]
        return np.sum(weights[0] * norm.cdf(v, means[0, :, 0], stds[:, 0]), axis=-1)

    def sample_velocity(self, x_t, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` velocities from pi_1(.; x_t, t) at a single location."""
        weights, means, stds = self.velocity_components(np.atleast_2d(x_t)[:1], t)
        comp = rng.choice(len(stds), size=n, p=weights[0] / weights[0].sum())
        return means[0, comp] + stds[comp] * rng.standard_normal((n, self.dim))

    def expected_velocity(self, x_t, t: float) -> np.ndarray:
        """Mean of the velocity distribution, i.e. the classic rectified-flow field."""
        weights, means, _ = self.velocity_components(x_t, t)
        return np.einsum("np,npd->nd", weights, means)


def _check_time(t):
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"time must lie in [0, 1], got {t}")


def marginal_rho_t(law: VelocityLaw, x_t, t: float) -> np.ndarray:
    return law.marginal_rho_t(x_t, t)


def velocity_pdf(law: VelocityLaw, v, x_t, t: float) -> np.ndarray:
    return law.velocity_pdf(v, x_t, t)


def velocity_pdf_general(rho0: Callable, rho1: Callable, rho_t: Callable, v, x_t, t: float) -> np.ndarray:
    """``rho0(x_t - t v) * rho1(x_t + (1 - t) v) / rho_t(x_t)`` for arbitrary densities."""
    v = np.asarray(v, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    marg = np.asarray(rho_t(x_t), dtype=np.float64)
    if np.any(marg < DENSITY_FLOOR):
        raise UndefinedRegionError(f"marginal density below {DENSITY_FLOOR} at t={t}")
    return rho0(x_t - t * v) * rho1(x_t + (1 - t) * v) / marg


# --------------------------------------------------------------------------
# acceleration oracles

def analytic_gaussian_acceleration(mean, std, u, tau: float) -> np.ndarray:
    """E[V1 - V0 | V_tau = u] for V0 ~ N(0, I), V1 ~ N(mean, diag(std^2)).

    With ``V_tau = (1 - tau) V0 + tau V1`` the pair (V1 - V0, V_tau) is
    jointly Gaussian, giving
    ``mean + (tau std^2 - (1 - tau)) / ((1 - tau)^2 + tau^2 std^2) * (u - tau mean)``
    per coordinate.  ``mean`` and ``std`` may carry a leading batch axis.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    var = std ** 2
    s2 = (1 - tau) ** 2 + tau ** 2 * var
    return mean + (tau * var - (1 - tau)) / s2 * (u - tau * mean)


def mixture_acceleration(weights, means, stds, u, tau: float, with_divergence: bool = False):
    """Rectified-flow field from N(0, I) to a diagonal Gaussian mixture.

    ``weights`` (N, P), ``means`` (N, P, dim), ``stds`` (P, dim) or
    (N, P, dim), ``u`` (N, dim).  Returns the field (N, dim) and, optionally,
    its exact divergence in ``u`` (N,).
    """
    u = np.asarray(u, dtype=np.float64)[:, None, :]
    var = np.asarray(stds, dtype=np.float64) ** 2
    s2 = (1 - tau) ** 2 + tau ** 2 * var
    centred = u - tau * means
    gain = (tau * var - (1 - tau)) / s2
    comp_field = means + gain * centred  # (N, P, dim)
    with np.errstate(divide="ignore"):
        logp = np.log(weights) - 0.5 * np.sum(centred ** 2 / s2 + np.log(s2), axis=-1)
    post = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))  # (N, P)
    field = np.einsum("np,npd->nd", post, comp_field)
    if not with_divergence:
        return field
    # d post_k / d u_i = post_k (l_ki - sum_j post_j l_ji), l_ki = -centred_ki / s2_ki
    dlog = -centred / s2
    dpost = post[..., None] * (dlog - np.einsum("np,npd->nd", post, dlog)[:, None, :])
    jac_diag = np.einsum("np,npd->nd", post, np.broadcast_to(gain, comp_field.shape)) \
        + np.sum(dpost * comp_field, axis=1)
    return field, jac_diag.sum(axis=-1)
