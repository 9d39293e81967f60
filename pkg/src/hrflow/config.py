"""Declarative experiment configuration (YAML) with strict schema checking.

Every section is a dataclass; unknown keys raise :class:`ConfigError`.  A
``profile`` key picks defaults for training scale, and explicit keys override
them.  ``dump`` writes fully resolved values, so parse -> dump -> parse is the
identity.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .distributions import DistributionSpec, spec_from_dict
from .errors import ConfigError
from .fixtures import FIXTURES, VELOCITY_CHECK_POINTS, fixture
from .sampler import SamplerSchedule
from .training import TrainConfig

SCHEMA_VERSION = 1

PROFILES = {
    # minutes on one core
    "desk": dict(iterations=4000, batch_size=4096, embed_dim=32, space_width=32,
                 hidden_dims=[64, 64, 64], lr_schedule="cosine"),
    # full training scale for the synthetic experiments
    "full": dict(iterations=15000, batch_size=51200, embed_dim=64, space_width=64,
                  hidden_dims=[128, 128, 128], lr_schedule="constant"),
}

SPLIT_GRID = ["1,100", "2,50", "5,20", "10,10", "20,5", "50,2", "100,1"]


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class TrainSection:
    depth: int = 2
    iterations: int = 4000
    batch_size: int = 4096
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    coupling: str = "independent"
    ot_chunk: int = 1024
    dataset_size: int = 100_000
    log_every: int = 100
    embed_dim: int = 32
    space_width: int = 32
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64, 64])
    activation: str = "silu"
    zero_init_last: bool = False

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]


@dataclass
class SampleSection:
    schedule: str = "5,20"
    n: int = 100_000
    record_trajectories: bool = False
    redraw_inner: bool = True

    def __post_init__(self):
        self.schedule = str(SamplerSchedule.parse(str(self.schedule)))
        if self.n < 1:
            raise ConfigError("sample.n must be >= 1")


@dataclass
class EvalSection:
    metric: str = "auto"
    n_reference: int = 100_000
    n_proj: int = 512

    def __post_init__(self):
        if self.metric not in ("auto", "w1", "sw2"):
            raise ConfigError(f"eval.metric must be auto, w1 or sw2, got {self.metric!r}")


@dataclass
class DensitySection:
    estimator: str = "alg3"
    n_points: int = 200
    points_path: str | None = None
    n_avg: int = 1
    pin_z0: bool = True
    t: float | None = None
    n_rho: int = 1000
    n_t_draws: int = 1
    trace: str = "auto"
    n_probes: int = 1
    probe_law: str = "rademacher"
    atol: float = 1e-5
    rtol: float = 1e-5
    max_steps: int = 10_000

    def __post_init__(self):
        if self.estimator not in ("alg3", "alg4"):
            raise ConfigError(f"density.estimator must be alg3 or alg4, got {self.estimator!r}")
        if self.estimator == "alg4" and self.t is not None and not 0.0 < self.t < 1.0:
            raise ConfigError(f"density.t must lie strictly inside (0, 1), got {self.t}")


@dataclass
class VelocityCheckSection:
    points: list[list[float]] = field(default_factory=lambda: [list(p) for p in VELOCITY_CHECK_POINTS])
    n_samples: int = 1_000_000
    window: float = 0.01
    v_min: float = -6.0
    v_max: float = 6.0
    bins: int = 240

    def __post_init__(self):
        self.points = [[float(x), float(t)] for x, t in self.points]
        if any(not 0.0 <= t <= 1.0 for _, t in self.points):
            raise ConfigError("velocity_check points need t in [0, 1]")


@dataclass
class AblateSection:
    nfe: int = 100
    schedules: list[str] = field(default_factory=lambda: list(SPLIT_GRID))
    n_models: int = 5
    n_eval_repeats: int = 5
    n_eval: int = 100_000

    def __post_init__(self):
        self.schedules = [str(SamplerSchedule.parse(str(s))) for s in self.schedules]
        if self.n_models < 1 or self.n_eval_repeats < 1:
            raise ConfigError("ablate.n_models and ablate.n_eval_repeats must be >= 1")

    def check_budget(self) -> None:
        bad = [s for s in self.schedules if SamplerSchedule.parse(s).nfe != self.nfe]
        if bad:
            raise ConfigError(f"schedules {bad} do not use the declared NFE budget {self.nfe}")


@dataclass
class ExperimentConfig:
    name: str
    source: DistributionSpec
    target: DistributionSpec | None
    schema_version: int = SCHEMA_VERSION
    profile: str = "desk"
    fixture: str | None = None
    dataset_path: str | None = None
    seed: int = 0
    out: str = "runs/default"
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    density: DensitySection = field(default_factory=DensitySection)
    velocity_check: VelocityCheckSection = field(default_factory=VelocityCheckSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def train_config(self, seed: int | None = None, dataset=None) -> TrainConfig:
        if self.target is None and dataset is None:
            raise ConfigError("config has neither a target spec nor a dataset")
        target = self.target if self.target is not None else _DatasetTarget(dataset)
        t = dataclasses.asdict(self.train)
        t["hidden_dims"] = tuple(t["hidden_dims"])
        return TrainConfig(source=self.source, target=target, seed=self.seed if seed is None else seed, **t)

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version, "name": self.name, "profile": self.profile,
               "seed": self.seed, "out": self.out}
        if self.fixture is not None:
            out["fixture"] = self.fixture
        else:
            out["source"] = self.source.to_dict()
            if self.target is not None:
                out["target"] = self.target.to_dict()
        if self.dataset_path is not None:
            out["dataset_path"] = self.dataset_path
        for name in ("train", "sample", "eval", "density", "velocity_check", "ablate"):
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


class _DatasetTarget(DistributionSpec):
    """Empirical target backed by a fixed array; only sampling is supported."""

    def __init__(self, data):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))

    @property
    def dim(self):
        return self.data.shape[1]

    def sample(self, n, rng):
        return self.data[rng.integers(0, len(self.data), size=n)]


_TOP_KEYS = {"schema_version", "name", "profile", "fixture", "source", "target", "dataset_path", "seed", "out",
             "train", "sample", "eval", "density", "velocity_check", "ablate"}


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if "name" not in data:
        raise ConfigError("missing 'name'")
    profile = data.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    name = data.get("fixture")
    if name is not None:
        if "source" in data or "target" in data:
            raise ConfigError("give either 'fixture' or explicit 'source'/'target', not both")
        source, target = fixture(name)
    else:
        if "source" not in data:
            raise ConfigError("missing source spec (or a 'fixture' name)")
        if "target" not in data and "dataset_path" not in data:
            raise ConfigError("missing target spec (give 'target' or 'dataset_path')")
        try:
            source = spec_from_dict(data["source"])
            target = spec_from_dict(data["target"]) if "target" in data else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad distribution spec: {exc}") from None
    overrides = data.get("train") or {}
    if not isinstance(overrides, dict):
        raise ConfigError(f"train: expected a mapping, got {type(overrides).__name__}")
    train = dict(PROFILES[profile])
    train.update(overrides)
    cfg = ExperimentConfig(
        name=str(data["name"]), source=source, target=target, profile=profile, fixture=name,
        dataset_path=data.get("dataset_path"), seed=int(data.get("seed", 0)), out=str(data.get("out", "runs/default")),
        train=_build(TrainSection, train, "train"),
        sample=_build(SampleSection, data.get("sample"), "sample"),
        eval=_build(EvalSection, data.get("eval"), "eval"),
        density=_build(DensitySection, data.get("density"), "density"),
        velocity_check=_build(VelocityCheckSection, data.get("velocity_check"), "velocity_check"),
        ablate=_build(AblateSection, data.get("ablate"), "ablate"),
    )
    if target is not None and source.dim != target.dim:
        raise ConfigError("source and target dimensions differ")
    # validate train settings eagerly so errors surface at parse time
    if target is not None:
        cfg.train_config()
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


__all__ = ["ExperimentConfig", "load", "loads", "from_dict", "PROFILES", "SPLIT_GRID", "FIXTURES"]
