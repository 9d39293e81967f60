"""Nested Euler integration of the coupled hierarchical ODEs.

Level 0 integrates the data-space position, level ``d`` integrates the
direction used as the Euler step of level ``d - 1``; the innermost level steps
along the model output.  Each level ``d`` takes ``steps[d]`` uniform steps of
size ``1 / steps[d]`` over ``[0, 1]``, so one generated sample costs exactly
``prod(steps)`` network evaluations.  All samples of a batch share the time
grid, which lets the network embed each time once per call.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .distributions import StandardGaussian
from .errors import ConfigError


@dataclass(frozen=True)
class SamplerSchedule:
    steps: tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if not steps or min(steps) < 1:
            raise ConfigError(f"every level needs >= 1 step, got {self.steps}")
        object.__setattr__(self, "steps", steps)

    @property
    def depth(self) -> int:
        return len(self.steps)

    @property
    def nfe(self) -> int:
        return math.prod(self.steps)

    @classmethod
    def parse(cls, text: str) -> "SamplerSchedule":
        try:
            return cls(tuple(int(s) for s in str(text).strip("()[] ").split(",")))
        except ValueError:
            raise ConfigError(f"cannot parse schedule {text!r}; expected e.g. 5,20") from None

    def __str__(self):
        return "(" + ",".join(map(str, self.steps)) + ")"


def nfe(schedule) -> int:
    if not isinstance(schedule, SamplerSchedule):
        schedule = SamplerSchedule(tuple(schedule))
    return schedule.nfe


@dataclass
class Trajectory:
    """Outer-level positions; ``positions`` has shape (steps + 1, n, dim)."""

    times: np.ndarray
    positions: np.ndarray

    def for_sample(self, i: int) -> "Trajectory":
        return Trajectory(self.times, self.positions[:, i:i + 1])


def _sources(model, sources):
    if sources is not None:
        return list(sources)
    found = getattr(model, "sources", None)
    if found is not None:
        return list(found)
    return [StandardGaussian(model.space_dim)] * model.depth


def sample_batch(model, schedule, n: int, rng: np.random.Generator, record_trajectories: bool = False,
                 sources=None, redraw_inner: bool = True):
    """Generate ``n`` samples by nested Euler integration.

    With ``redraw_inner`` (default) every inner level draws a fresh source
    sample each time it is entered; otherwise one source sample per level
    and per generated point is drawn up front and reused.

    Returns ``(points (n, dim), trajectory or None)``.
    """
    if not isinstance(schedule, SamplerSchedule):
        schedule = SamplerSchedule(tuple(schedule))
    if schedule.depth != model.depth:
        raise ConfigError(f"schedule {schedule} has depth {schedule.depth}, model has depth {model.depth}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    sources = _sources(model, sources)
    fixed = None if redraw_inner else [s.sample(n, rng) for s in sources]
    steps = schedule.steps
    depth = len(steps)
    record = [] if record_trajectories else None

    def integrate(level, states, times):
        z = fixed[level].copy() if fixed is not None else sources[level].sample(n, rng)
        n_steps = steps[level]
        dt = 1.0 / n_steps
        if record is not None and level == 0:
            record.append(z.copy())
        for j in range(n_steps):
            t = j * dt
            if level == depth - 1:
                direction = model(states + [z], times + [t])
            else:
                direction = integrate(level + 1, states + [z], times + [t])
            z = z + dt * direction
            if record is not None and level == 0:
                record.append(z.copy())
        return z

    z1 = integrate(0, [], [])
    traj = None
    if record is not None:
        traj = Trajectory(np.arange(steps[0] + 1) / steps[0], np.stack(record))
    return z1, traj


def sample_one(model, schedule, rng: np.random.Generator, **kwargs):
    points, traj = sample_batch(model, schedule, 1, rng, record_trajectories=True, **kwargs)
    return points[0], traj


def path_curvature(traj: Trajectory) -> np.ndarray:
    """Per-sample sum of ``|dz_j - dz_{j-1}|`` over consecutive outer steps."""
    dz = np.diff(traj.positions, axis=0)
    return np.linalg.norm(np.diff(dz, axis=0), axis=-1).sum(axis=0)


def write_samples_csv(path, points: np.ndarray) -> None:
    dim = points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(dim)])
        w.writerows(points.tolist())


def read_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path} contains no samples")
    cols = [i for i, name in enumerate(rows[0]) if name.startswith("z")]
    return np.array([[float(r[i]) for i in cols] for r in rows[1:]], dtype=np.float64)


def write_trajectories_csv(path, traj: Trajectory) -> None:
    n_steps, n, dim = traj.positions.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "t"] + [f"z{i}" for i in range(dim)])
        for i in range(n):
            for j in range(n_steps):
                w.writerow([i, j, repr(float(traj.times[j]))] + traj.positions[j, i].tolist())
