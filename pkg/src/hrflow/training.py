"""Hierarchical rectified flow training.

A depth-``D`` example draws one source sample per level ``x0[d]`` and one
time per level ``t[d]``, then builds the interpolants

    x_t[d] = (1 - t[d]) x0[d] + t[d] (x1 - sum_{k<d} x0[k])

and regresses the network output onto ``x1 - sum_d x0[d]``.  Depth 1 is
classic rectified flow; depth 2 is acceleration matching with
``(x_t, t, v_tau, tau)`` as inputs.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .coupling import DEFAULT_OT_CAP, MODES, couple_for_training
from .distributions import DistributionSpec, StandardGaussian
from .errors import ConfigError, TrainingError
from .model import HrfModel

log = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    """A batch of depth-``D`` examples.

    ``x0`` has shape (D, B, dim), ``t`` (D, B), ``x_t`` (D, B, dim) and
    ``target`` (B, dim).
    """

    x0: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray

    @property
    def depth(self) -> int:
        return self.x0.shape[0]


def build_example(x1, x0, t) -> TrainingExample:
    """Deterministic part of example construction from given draws."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    residual = x1.copy()
    x_t = np.empty_like(x0)
    for d in range(x0.shape[0]):
        td = t[d][:, None]
        x_t[d] = (1 - td) * x0[d] + td * residual
        residual = residual - x0[d]
    return TrainingExample(x0, t, x_t, residual)


def make_training_example(x1, rng: np.random.Generator, depth: int, x0_first=None,
                          sources: list[DistributionSpec] | None = None) -> TrainingExample:
    """Draw per-level sources and times for every row of ``x1``.

    ``x0_first`` overrides the level-0 source draw (used after minibatch OT
    coupling).  Draw order: level sources, then times.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    batch, dim = x1.shape
    sources = sources or [StandardGaussian(dim)] * depth
    x0 = np.empty((depth, batch, dim))
    for d in range(depth):
        x0[d] = x0_first if (d == 0 and x0_first is not None) else sources[d].sample(batch, rng)
    t = rng.random((depth, batch))
    return build_example(x1, x0, t)


def loss_and_grads(model: HrfModel, example: TrainingExample):
    """Mean (over batch and coordinates) squared error and its exact gradient."""
    B, dim = example.target.shape
    if B == 0:
        raise ConfigError("empty batch")
    pred, cache = nn.forward(model.params, list(example.x_t), list(example.t), return_cache=True)
    diff = pred - example.target
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")
    grads = nn.backward(model.params, cache, 2.0 * diff / diff.size)
    return loss, grads


def per_example_loss(model, example: TrainingExample) -> np.ndarray:
    pred = model(list(example.x_t), list(example.t))
    return np.mean((pred - example.target) ** 2, axis=1)


@dataclass
class TrainConfig:
    source: DistributionSpec
    target: DistributionSpec
    depth: int = 2
    iterations: int = 4000
    batch_size: int = 4096
    lr: float = 1e-3
    lr_schedule: str = "constant"
    seed: int = 0
    coupling: str = "independent"
    ot_chunk: int = DEFAULT_OT_CAP
    dataset_size: int = 100_000
    log_every: int = 100
    embed_dim: int = 64
    space_width: int = 64
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    zero_init_last: bool = False
    inner_sources: list[DistributionSpec] | None = field(default=None)

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1 or self.depth < 1 or self.log_every < 1:
            raise ConfigError("batch_size, iterations, depth and log_every must all be >= 1")
        if self.coupling not in MODES:
            raise ConfigError(f"unknown coupling {self.coupling!r}; expected one of {MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.source.dim != self.target.dim:
            raise ConfigError("source and target dimensions differ")
        if self.dataset_size < 0:
            raise ConfigError("dataset_size must be >= 0 (0 draws fresh target samples)")

    def net_config(self) -> nn.MlpConfig:
        return nn.MlpConfig(depth=self.depth, space_dim=self.target.dim, embed_dim=self.embed_dim,
                            space_width=self.space_width, hidden_dims=tuple(self.hidden_dims),
                            activation=self.activation, zero_init_last=self.zero_init_last)

    def level_sources(self) -> list[DistributionSpec]:
        inner = self.inner_sources or [StandardGaussian(self.target.dim)] * (self.depth - 1)
        if len(inner) != self.depth - 1:
            raise ConfigError(f"need {self.depth - 1} inner source distributions, got {len(inner)}")
        return [self.source, *inner]


class _Batches:
    """Minibatches of target samples: fresh draws or shuffled passes over a fixed dataset."""

    def __init__(self, target, dataset, size, batch, rng):
        self.target, self.batch, self.rng = target, batch, rng
        self.data = dataset
        if self.data is None and size > 0:
            self.data = target.sample(size, rng)
        self.order, self.pos = None, 0

    def next(self):
        if self.data is None:
            return self.target.sample(self.batch, self.rng)
        out = []
        need = self.batch
        while need:
            if self.order is None or self.pos == len(self.order):
                self.order, self.pos = self.rng.permutation(len(self.data)), 0
            take = self.order[self.pos:self.pos + need]
            self.pos += len(take)
            need -= len(take)
            out.append(self.data[take])
        return np.concatenate(out)


def _lr(config: TrainConfig, it: int) -> float:
    if config.lr_schedule == "cosine":
        return config.lr * 0.5 * (1 + math.cos(math.pi * it / config.iterations))
    return config.lr


def train(config: TrainConfig, dataset: np.ndarray | None = None, callback=None):
    """Run the training loop; returns ``(model, losses)``.

    ``losses`` holds the minibatch loss of every iteration.  Everything is a
    deterministic function of ``config.seed``.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, data_rng, rng = (np.random.default_rng(s) for s in seeds)
    sources = config.level_sources()
    model = HrfModel(nn.init_params(config.net_config(), init_rng), sources)
    adam = nn.AdamState.fresh(model.params, lr=config.lr)
    batches = _Batches(config.target, dataset, config.dataset_size, config.batch_size, data_rng)
    losses = np.empty(config.iterations)
    for it in range(config.iterations):
        x1 = batches.next()
        x0 = sources[0].sample(len(x1), rng)
        x1 = couple_for_training(config.coupling, x0, x1, config.ot_chunk)
        example = make_training_example(x1, rng, config.depth, x0_first=x0, sources=sources)
        try:
            loss, grads = loss_and_grads(model, example)
        except TrainingError as exc:
            raise TrainingError(str(exc), iteration=it) from None
        adam.step = it
        nn.adam_step(adam, model.params, grads, lr=_lr(config, it))
        losses[it] = loss
        if (it + 1) % config.log_every == 0:
            log.info("iter %d loss %.5f", it + 1, loss)
            if callback is not None:
                callback(it + 1, loss)
    return model, losses


def write_loss_csv(path, losses, log_every: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it in range(log_every, len(losses) + 1, log_every):
            w.writerow([it, repr(float(losses[it - 1]))])
