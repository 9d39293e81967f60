"""Direction-field models: the trained network and closed-form oracle fields.

Anything with ``depth``, ``space_dim`` and ``__call__(spaces, times)`` can be
sampled from.  Density estimation additionally needs either ``vjp`` (trained
network) or ``exact_divergence`` (oracles).
"""
from __future__ import annotations

import numpy as np

from . import nn
from .distributions import DistributionSpec, StandardGaussian, VelocityLaw, mixture_acceleration, spec_from_dict
from .errors import ConfigError


class HrfModel:
    """Depth-``D`` hierarchical rectified flow direction field backed by an MLP.

    ``sources[d]`` is the source distribution of level ``d``; level 0 is the
    data-space source, deeper levels default to standard Gaussians.
    """

    def __init__(self, params: nn.MlpParams, sources: list[DistributionSpec] | None = None):
        self.params = params
        cfg = params.config
        if sources is None:
            sources = [StandardGaussian(cfg.space_dim)] * cfg.depth
        if len(sources) != cfg.depth or any(s.dim != cfg.space_dim for s in sources):
            raise ConfigError("need one source distribution of matching dimension per level")
        self.sources = list(sources)

    @classmethod
    def create(cls, config: nn.MlpConfig, rng: np.random.Generator, source: DistributionSpec | None = None):
        sources = [source or StandardGaussian(config.space_dim)]
        sources += [StandardGaussian(config.space_dim)] * (config.depth - 1)
        return cls(nn.init_params(config, rng), sources)

    @property
    def config(self) -> nn.MlpConfig:
        return self.params.config

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def space_dim(self) -> int:
        return self.config.space_dim

    def __call__(self, spaces, times) -> np.ndarray:
        return nn.forward(self.params, spaces, times)

    def vjp(self, spaces, times, cotangent, slot: int = -1) -> np.ndarray:
        return nn.input_vjp(self.params, spaces, times, cotangent, slot % self.depth)

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["sources"] = [s.to_dict() for s in self.sources]
        nn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> tuple["HrfModel", dict]:
        params, meta = nn.load_checkpoint(path)
        sources = [spec_from_dict(s) for s in meta.get("sources", [])] or None
        return cls(params, sources), meta


def _scalar_time(t):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if not np.all(t == t[0]):
        raise ConfigError("oracle fields need a time shared by the whole batch")
    return float(t[0])


class OracleVelocityField:
    """Depth-1 field: the exact expected velocity E[X1 - X0 | X_t = x]."""

    depth = 1

    def __init__(self, source: DistributionSpec, target: DistributionSpec):
        self.law = VelocityLaw(source, target)
        self.sources = [source]

    @property
    def space_dim(self):
        return self.law.dim

    def __call__(self, spaces, times):
        return self.law.expected_velocity(spaces[0], _scalar_time(times[0]))


class OracleAccelerationField:
    """Depth-2 field: exact E[V1 - V0 | V_tau = u] with V1 ~ pi_1(.; x_t, t).

    For a single-Gaussian target this is the closed form of
    :func:`~hrflow.distributions.analytic_gaussian_acceleration`; mixtures
    use the posterior-weighted sum over velocity components.
    """

    depth = 2

    def __init__(self, source: DistributionSpec, target: DistributionSpec):
        self.law = VelocityLaw(source, target)
        self.sources = [source, StandardGaussian(self.law.dim)]

    @property
    def space_dim(self):
        return self.law.dim

    def _components(self, spaces, times):
        x = np.atleast_2d(np.asarray(spaces[0], dtype=np.float64))
        u = np.atleast_2d(np.asarray(spaces[1], dtype=np.float64))
        x = np.broadcast_to(x, (max(len(x), len(u)), self.space_dim))
        u = np.broadcast_to(u, x.shape)
        weights, means, stds = self.law.velocity_components(x, _scalar_time(times[0]))
        return weights, means, stds, u, _scalar_time(times[1])

    def __call__(self, spaces, times):
        weights, means, stds, u, tau = self._components(spaces, times)
        return mixture_acceleration(weights, means, stds, u, tau)

    def exact_divergence(self, spaces, times) -> np.ndarray:
        weights, means, stds, u, tau = self._components(spaces, times)
        return mixture_acceleration(weights, means, stds, u, tau, with_divergence=True)[1]


class CountingField:
    """Wraps a field and counts evaluated rows (one row = one sample's NFE)."""

    def __init__(self, field):
        self.field = field
        self.rows = 0
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.field, name)

    def __call__(self, spaces, times):
        out = self.field(spaces, times)
        self.rows += out.shape[0]
        self.calls += 1
        return out
