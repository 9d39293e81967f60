"""Pairing source and target samples within a training minibatch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError

DEFAULT_OT_CAP = 1024
MODES = ("independent", "ot")


@dataclass
class BatchCoupling:
    """Source ``i`` is paired with target ``permutation[i]``."""

    permutation: np.ndarray
    transport_cost: float


def _cost(x0s, x1s, perm):
    return float(np.mean(np.sum((x1s[perm] - x0s) ** 2, axis=1)))


def _check(x0s, x1s):
    x0s = np.asarray(x0s, dtype=np.float64)
    x1s = np.asarray(x1s, dtype=np.float64)
    if x0s.ndim == 1:
        x0s = x0s[:, None]
    if x1s.ndim == 1:
        x1s = x1s[:, None]
    if x0s.shape != x1s.shape:
        raise ConfigError(f"batch shapes differ: {x0s.shape} vs {x1s.shape}")
    return x0s, x1s


def independent_coupling(x0s, x1s) -> BatchCoupling:
    x0s, x1s = _check(x0s, x1s)
    perm = np.arange(len(x0s))
    return BatchCoupling(perm, _cost(x0s, x1s, perm))


def ot_coupling(x0s, x1s, cap: int = DEFAULT_OT_CAP, solver: str = "auto") -> BatchCoupling:
    """Exact squared-Euclidean assignment between the two batches.

    In 1D the monotone (sorted) matching is optimal for any convex cost, so
    ``solver="auto"`` sorts there and uses the assignment solver otherwise.
    """
    x0s, x1s = _check(x0s, x1s)
    if len(x0s) > cap:
        raise ConfigError(f"OT batch of {len(x0s)} exceeds the cap of {cap}; use a smaller OT sub-batch (ot_chunk)")
    if solver not in ("auto", "assignment"):
        raise ConfigError(f"unknown OT solver {solver!r}")
    if solver == "auto" and x0s.shape[1] == 1:
        perm = np.empty(len(x0s), dtype=np.intp)
        perm[np.argsort(x0s[:, 0], kind="stable")] = np.argsort(x1s[:, 0], kind="stable")
        return BatchCoupling(perm, _cost(x0s, x1s, perm))
    cost = np.sum((x0s[:, None, :] - x1s[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x0s), dtype=np.intp)
    perm[rows] = cols
    return BatchCoupling(perm, _cost(x0s, x1s, perm))


def couple_for_training(mode: str, x0s, x1s, chunk: int = DEFAULT_OT_CAP) -> np.ndarray:
    """Reorder ``x1s`` so that row ``i`` is the partner of ``x0s[i]``.

    In OT mode the batch is split into consecutive chunks of at most
    ``chunk`` rows and each chunk is matched exactly.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown coupling mode {mode!r}; expected one of {MODES}")
    x0s, x1s = _check(x0s, x1s)
    if mode == "independent":
        return x1s
    out = np.empty_like(x1s)
    for start in range(0, len(x0s), chunk):
        sl = slice(start, start + chunk)
        perm = ot_coupling(x0s[sl], x1s[sl], cap=chunk).permutation
        out[sl] = x1s[sl][perm]
    return out
