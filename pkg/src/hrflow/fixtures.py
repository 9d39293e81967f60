"""Named source/target pairs for the synthetic experiments.

Fixed mixture parameters, chosen so every pair has well-separated modes:

* ``1n-2n``: N(0, 1) to two equal-weight Gaussians at -1 and +1 with std 0.14.
* ``1n-5n``: N(0, 1) to five equal-weight Gaussians equally spaced on [-4, 4], std 0.2.
* ``2n-2n``: the ``1n-2n`` target used as both source and target.
* ``1n-6n``: 2D N(0, I) to six Gaussians on a circle of radius 4, std 0.4.
* ``8n-moons``: eight Gaussians on a circle of radius 4, std 0.5, to moons with noise 0.1.
"""
from __future__ import annotations

import numpy as np

from .distributions import DistributionSpec, GaussianMixture, GaussianRing, Moons, StandardGaussian
from .errors import ConfigError

TWO_MODES = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[0.14], [0.14]])
FIVE_MODES = GaussianMixture(np.full(5, 0.2), np.linspace(-4.0, 4.0, 5)[:, None], np.full((5, 1), 0.2))

FIXTURES: dict[str, tuple[DistributionSpec, DistributionSpec]] = {
    "1n-2n": (StandardGaussian(1), TWO_MODES),
    "1n-5n": (StandardGaussian(1), FIVE_MODES),
    "2n-2n": (TWO_MODES, TWO_MODES),
    "1n-6n": (StandardGaussian(2), GaussianRing(6, 4.0, 0.4)),
    "8n-moons": (GaussianRing(8, 4.0, 0.5), Moons(0.1)),
}

# (x_t, t) points for the velocity-law check, one per regime: t=0, interior, t=1
VELOCITY_CHECK_POINTS = ((-1.0, 0.0), (0.0, 0.4), (0.5, 0.6), (1.0, 1.0))


def fixture(name: str) -> tuple[DistributionSpec, DistributionSpec]:
    try:
        return FIXTURES[name]
    except KeyError:
        raise ConfigError(f"unknown fixture {name!r}; expected one of {sorted(FIXTURES)}") from None
