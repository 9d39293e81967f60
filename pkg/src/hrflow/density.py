"""Likelihood estimation for depth-2 models.

The inner ODE ``du/dtau = a(z_t, t, u, tau)`` transports the velocity source
``pi_0`` to the modelled velocity distribution ``pi_1(.; z_t, t)``.  Along a
solution the instantaneous change of variables gives
``d log p(u_tau) / dtau = -div_u a``, so integrating backwards from a fixed
``u`` at ``tau = 1`` down to ``tau = 0`` yields

    log pi_1(u; z_t, t) = log pi_0(u_0) - int_0^1 div_u a(z_t, t, u_tau, tau) dtau.

Data densities follow from the velocity density either at ``t = 0``
(:func:`density_alg3`) or at an intermediate time (:func:`density_alg4`).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, SolverError

LN2 = math.log(2.0)

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass(frozen=True)
class SolverConfig:
    atol: float = 1e-5
    rtol: float = 1e-5
    max_steps: int = 10_000

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0 or self.max_steps < 1:
            raise ConfigError(f"invalid solver settings {self}")


@dataclass
class SolveResult:
    y: np.ndarray
    n_steps: int
    n_rejected: int
    nfev: int


def _initial_step(f, t0, y0, f0, direction, span, atol, rtol):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def rk45_solve(field, y0, span, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Dormand-Prince 5(4) with local extrapolation and max-norm error control.

    Every component must satisfy ``|err_i| <= atol + rtol * max(|y_i|, |y_new_i|)``.
    ``span`` may run backwards in time.
    """
    t0, t1 = map(float, span)
    y = np.array(y0, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(y)):
        raise ConfigError("initial state must be finite")
    if t0 == t1:
        return SolveResult(y, 0, 0, 0)
    direction = 1.0 if t1 > t0 else -1.0
    total = abs(t1 - t0)
    f = lambda t, x: np.asarray(field(t, x), dtype=np.float64)
    k = np.empty((7,) + y.shape)
    k[0] = f(t0, y)
    nfev = 1
    h = _initial_step(f, t0, y, k[0], direction, total, cfg.atol, cfg.rtol)
    nfev += 1
    t, done = t0, 0.0
    n_steps = n_rejected = 0
    err = float("nan")
    while done < total:
        if n_steps + n_rejected >= cfg.max_steps:
            raise SolverError(f"RK45 exceeded {cfg.max_steps} steps at tau={t:.6g}", err)
        h = min(h, total - done)
        hs = direction * h
        for i in range(1, 7):
            k[i] = f(t + _C[i] * hs, y + hs * np.tensordot(_A[i], k[:i], axes=1))
        nfev += 6
        y_new = y + hs * np.tensordot(_B5[:6], k[:6], axes=1)
        # k[6] was evaluated at y_new (FSAL), so the error estimate uses all seven stages
        err_vec = hs * np.tensordot(_E, k, axes=1)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale))
        if not math.isfinite(err):
            raise SolverError(f"non-finite state at tau={t:.6g}")
        if err <= 1.0:
            done = total if total - done - h <= 1e-12 * total else done + h
            t = t1 if done == total else t0 + direction * done
            y = y_new
            k[0] = k[6]
            n_steps += 1
            factor = 10.0 if err == 0 else min(10.0, 0.9 * err ** -0.2)
        else:
            n_rejected += 1
            factor = max(0.2, 0.9 * err ** -0.2)
        h *= factor
    return SolveResult(y, n_steps, n_rejected, nfev)


# --------------------------------------------------------------------------
# divergence

def probe_vectors(shape, rng: np.random.Generator, probe_law: str = "rademacher") -> np.ndarray:
    if probe_law == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    if probe_law == "gaussian":
        return rng.standard_normal(shape)
    raise ConfigError(f"unknown probe law {probe_law!r}")


def hutchinson_divergence(vjp, point, n_probes: int, rng: np.random.Generator,
                          probe_law: str = "rademacher", probes: np.ndarray | None = None) -> np.ndarray:
    """Row-wise estimate of ``trace(d field / d point)``.

    ``vjp(point, eps)`` must return ``eps^T J`` row-wise for ``point`` and
    ``eps`` of shape (N, dim).  The estimate is the probe mean of
    ``eps^T J eps``.
    """
    if n_probes < 1:
        raise ConfigError(f"n_probes must be >= 1, got {n_probes}")
    point = np.atleast_2d(np.asarray(point, dtype=np.float64))
    if probes is None:
        probes = probe_vectors((n_probes,) + point.shape, rng, probe_law)
    total = np.zeros(point.shape[0])
    for eps in probes:
        total += np.sum(vjp(point, eps) * eps, axis=1)
    return total / len(probes)


def exact_divergence(vjp, point) -> np.ndarray:
    """Trace via one vector-Jacobian product per coordinate."""
    point = np.atleast_2d(np.asarray(point, dtype=np.float64))
    total = np.zeros(point.shape[0])
    for i in range(point.shape[1]):
        e = np.zeros_like(point)
        e[:, i] = 1.0
        total += vjp(point, e)[:, i]
    return total


# --------------------------------------------------------------------------
# likelihoods

def _velocity_source(model):
    sources = getattr(model, "sources", None)
    if sources is None or len(sources) < 2:
        from .distributions import StandardGaussian
        return StandardGaussian(model.space_dim)
    return sources[1]


def velocity_log_likelihood(model, u, z_t, t: float, cfg: SolverConfig = SolverConfig(),
                            rng: np.random.Generator | None = None, trace: str = "auto",
                            n_probes: int = 1, probe_law: str = "rademacher", return_stats: bool = False,
                            convention: str = "standard"):
    """log pi_1(u; z_t, t) for each row of ``u`` and ``z_t`` under a depth-2 model.

    ``trace``: ``"exact"`` uses the model's exact divergence (oracles) or one
    reverse pass per coordinate; ``"hutchinson"`` uses ``n_probes`` probe
    vectors drawn once per solve; ``"auto"`` is exact in 1D and for
    oracles, Hutchinson otherwise.

    ``convention="flipped"`` adds the divergence integral with the opposite
    sign.  It exists only so tests can show the Gaussian oracle rejects it.
    """
    if model.depth != 2:
        raise ConfigError(f"likelihoods are defined for depth-2 models, got depth {model.depth}")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"t must lie in [0, 1], got {t}")
    dim = model.space_dim
    u = np.atleast_2d(np.asarray(u, dtype=np.float64)).reshape(-1, dim)
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64)).reshape(-1, dim)
    z_t = np.broadcast_to(z_t, u.shape)
    n = u.shape[0]
    has_exact = hasattr(model, "exact_divergence")
    if trace == "auto":
        trace = "exact" if (has_exact or dim == 1) else "hutchinson"
    if convention not in ("standard", "flipped"):
        raise ConfigError(f"unknown sign convention {convention!r}")
    if trace not in ("exact", "hutchinson"):
        raise ConfigError(f"unknown trace mode {trace!r}")
    probes = None
    if trace == "hutchinson":
        if not hasattr(model, "vjp"):
            raise ConfigError("Hutchinson divergence needs a model with vjp")
        rng = rng if rng is not None else np.random.default_rng(0)
        probes = probe_vectors((n_probes, n, dim), rng, probe_law)

    def rhs(tau, y):
        uu = y[:n * dim].reshape(n, dim)
        spaces, times = [z_t, uu], [t, tau]
        a = model(spaces, times)
        if trace == "exact" and has_exact:
            div = model.exact_divergence(spaces, times)
        else:
            vjp = lambda p, eps: model.vjp([z_t, p], times, eps, slot=1)
            if trace == "exact":
                div = exact_divergence(vjp, uu)
            else:
                div = hutchinson_divergence(vjp, uu, n_probes, None, probes=probes)
        return np.concatenate([a.reshape(-1), div])

    y1 = np.concatenate([u.reshape(-1), np.zeros(n)])
    res = rk45_solve(rhs, y1, (1.0, 0.0), cfg)
    u0 = res.y[:n * dim].reshape(n, dim)
    # accumulated int_1^0 div dtau = -int_0^1 div dtau
    sign = 1.0 if convention == "standard" else -1.0
    logp = _velocity_source(model).log_density(u0) + sign * res.y[n * dim:]
    if return_stats:
        return logp, res
    return logp


def bits_per_dim(log_density_nats, dim: int):
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    return -np.asarray(log_density_nats) / (dim * LN2)


@dataclass
class LikelihoodReport:
    """Per-point log densities (nats) and bits per dimension."""

    points: np.ndarray
    log_density: np.ndarray
    bpd: np.ndarray
    estimator: str
    n_outer_samples: int
    t: np.ndarray
    n_probes: int = 0
    nfev: int = 0

    @property
    def mean_bpd(self) -> float:
        return float(np.mean(self.bpd))


def _log_mean_exp(x, axis=0):
    return logsumexp(x, axis=axis) - math.log(x.shape[axis])


def density_alg3(model, z1, rng: np.random.Generator, n_avg: int = 1, z0=None,
                 cfg: SolverConfig = SolverConfig(), **ll_kwargs) -> LikelihoodReport:
    """rho_1(z1) = pi_1(z1 - z0; z0, 0), averaged over ``n_avg`` source draws.

    ``z0`` pins the source point (e.g. 0) instead of drawing it.
    """
    if n_avg < 1:
        raise ConfigError(f"n_avg must be >= 1, got {n_avg}")
    dim = model.space_dim
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64)).reshape(-1, dim)
    n = len(z1)
    if z0 is not None:
        z0s = np.broadcast_to(np.asarray(z0, dtype=np.float64).reshape(1, 1, dim), (n_avg, n, dim))
    else:
        z0s = model.sources[0].sample(n_avg * n, rng).reshape(n_avg, n, dim)
    u = (z1[None] - z0s).reshape(-1, dim)
    logp, res = velocity_log_likelihood(model, u, z0s.reshape(-1, dim), 0.0, cfg, rng=rng,
                                        return_stats=True, **ll_kwargs)
    logp = _log_mean_exp(logp.reshape(n_avg, n), axis=0)
    return LikelihoodReport(z1, logp, bits_per_dim(logp, dim), "alg3-t0", n_avg, np.zeros(n),
                            ll_kwargs.get("n_probes", 0), res.nfev)


def compose_log_density(log_pi1, log_rho_t, log_rho0):
    """log rho_1(z1) = log pi_1(u; z_t, t) + log rho_t(z_t) - log rho_0(z_t - t u)."""
    return np.asarray(log_pi1) + np.asarray(log_rho_t) - np.asarray(log_rho0)


def estimate_log_rho_t(model, z_t, t: float, rng: np.random.Generator, n_rho: int = 1000,
                       cfg: SolverConfig = SolverConfig(), **ll_kwargs) -> np.ndarray:
    """Monte Carlo log rho_t(z_t) from one-step flows out of ``n_rho`` source points.

    A straight step from ``z0`` with velocity ``v`` reaches ``z0 + t v``, so
    ``rho_t(z_t | z0) = t^-dim pi_1((z_t - z0) / t; z0, 0)``.
    """
    dim = model.space_dim
    z_t = np.atleast_2d(z_t).reshape(-1, dim)
    n = len(z_t)
    z0s = model.sources[0].sample(n_rho * n, rng).reshape(n_rho, n, dim)
    v = (z_t[None] - z0s) / t
    logp = velocity_log_likelihood(model, v.reshape(-1, dim), z0s.reshape(-1, dim), 0.0, cfg, rng=rng,
                                   **ll_kwargs)
    return _log_mean_exp(logp.reshape(n_rho, n), axis=0) - dim * math.log(t)


def density_alg4(model, z1, rng: np.random.Generator, n_rho: int = 1000, t: float | None = None,
                 cfg: SolverConfig = SolverConfig(), **ll_kwargs) -> LikelihoodReport:
    """Density through an intermediate time ``t`` in (0, 1).

    ``t=None`` draws ``t ~ U(0, 1)`` independently for every point.
    """
    dim = model.space_dim
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64)).reshape(-1, dim)
    n = len(z1)
    if t is not None:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"t must lie strictly inside (0, 1), got {t}")
        if t > 0.95:
            warnings.warn(f"t={t} is close to 1; the estimate's variance grows sharply", RuntimeWarning)
        ts = np.full(n, float(t))
    else:
        ts = rng.uniform(0.0, 1.0, size=n)
    out = np.empty(n)
    for value in np.unique(ts):
        idx = np.flatnonzero(ts == value)
        z0 = model.sources[0].sample(len(idx), rng)
        z_t = value * z1[idx] + (1 - value) * z0
        u = (z1[idx] - z_t) / (1 - value)
        log_pi = velocity_log_likelihood(model, u, z_t, value, cfg, rng=rng, **ll_kwargs)
        log_rho_t = estimate_log_rho_t(model, z_t, value, rng, n_rho, cfg, **ll_kwargs)
        log_rho0 = model.sources[0].log_density(z_t - value * u)
        out[idx] = compose_log_density(log_pi, log_rho_t, log_rho0)
    return LikelihoodReport(z1, out, bits_per_dim(out, dim), "alg4-t", n_rho, ts, ll_kwargs.get("n_probes", 0))


def write_report_csv(path, report: LikelihoodReport) -> None:
    dim = report.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(dim)] + ["estimator", "t", "log_density", "bpd", "n_probes", "nfev"])
        for p, t, ld, b in zip(report.points, report.t, report.log_density, report.bpd):
            w.writerow(list(map(repr, map(float, p))) + [report.estimator, repr(float(t)), repr(float(ld)),
                                                         repr(float(b)), report.n_probes, report.nfev])
