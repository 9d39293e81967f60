"""Small fully-connected direction-field network with hand-written backprop.

The network takes ``depth`` (space, time) slots.  Each slot has its own
space path (linear + activation) and time path (sinusoidal embedding, linear,
activation).  The slot features are concatenated and fed through a shared
fully-connected trunk that outputs a vector of ``space_dim`` entries.

All parameters live in one flat float64 vector; named views into it are
exposed through :class:`MlpParams` so that Adam and checkpointing can work on
the flat array directly.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError

CHECKPOINT_VERSION = 1
# Rows per block when evaluating without a cache; large batches are streamed
# through in blocks of this size, which keeps the activations cache-resident.
FORWARD_BLOCK = 2048


@dataclass(frozen=True)
class MlpConfig:
    depth: int = 2
    space_dim: int = 1
    embed_dim: int = 64
    space_width: int = 64
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    zero_init_last: bool = False
    # geometric frequency range of the sinusoidal time embedding
    min_freq: float = 1.0
    max_freq: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.depth, self.space_dim, self.embed_dim, self.space_width, *self.hidden_dims]
        if not self.hidden_dims or min(dims) < 1:
            raise ConfigError(f"all network dimensions must be >= 1, got {self}")
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even, got {self.embed_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def slot_width(self) -> int:
        return self.space_width + self.embed_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for d in range(self.depth):
            shapes += [
                (f"slot{d}.space.W", (self.space_dim, self.space_width)),
                (f"slot{d}.space.b", (self.space_width,)),
                (f"slot{d}.time.W", (self.embed_dim, self.embed_dim)),
                (f"slot{d}.time.b", (self.embed_dim,)),
            ]
        widths = [self.depth * self.slot_width, *self.hidden_dims, self.space_dim]
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"trunk{i}.W", (n_in, n_out)), (f"trunk{i}.b", (n_out,))]
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(**d)


@dataclass
class MlpParams:
    """Flat parameter vector plus named, shaped views into it."""

    config: MlpConfig
    flat: np.ndarray
    views: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        shapes = self.config.layer_shapes()
        expected = sum(math.prod(s) for _, s in shapes)
        if self.flat.shape != (expected,):
            raise ShapeError(f"flat parameter vector has shape {self.flat.shape}, expected ({expected},)")
        self.views = _carve(self.flat, shapes)

    @property
    def total_count(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.config, np.zeros_like(self.flat))


def _carve(flat, shapes):
    views, offset = {}, 0
    for name, shape in shapes:
        size = math.prod(shape)
        views[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return views


def init_params(config: MlpConfig, rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = MlpParams(config, np.zeros(sum(math.prod(s) for _, s in config.layer_shapes())))
    fan_in = {}
    for name, shape in config.layer_shapes():
        if name.endswith(".W"):
            fan_in[name[:-2]] = shape[0]
    for name, shape in config.layer_shapes():
        bound = 1.0 / math.sqrt(fan_in[name[:-2]])
        params[name][...] = rng.uniform(-bound, bound, size=shape)
    if config.zero_init_last:
        last = len(config.hidden_dims)
        params[f"trunk{last}.W"][...] = 0.0
        params[f"trunk{last}.b"][...] = 0.0
    return params


# activations: value, and value with the derivative w.r.t. the pre-activation

def _sigmoid(x):
    s = np.tanh(0.5 * x)
    s += 1.0
    s *= 0.5
    return s


def _silu(x):
    s = _sigmoid(x)
    s *= x
    return s


def _silu_and_grad(x):
    # one sigmoid serves both; the forward pass caches the derivative for backprop
    s = _sigmoid(x)
    g = 1.0 - s
    g *= x
    g += 1.0
    g *= s
    s *= x
    return s, g


def _tanh_and_grad(x):
    y = np.tanh(x)
    return y, 1.0 - y ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_and_grad),
    "tanh": (np.tanh, _tanh_and_grad),
    "identity": (lambda x: x, lambda x: (x, np.ones_like(x))),
}


def embedding_frequencies(dim: int, min_freq: float = 1.0, max_freq: float = 100.0) -> np.ndarray:
    half = dim // 2
    if half == 1:
        return np.array([min_freq])
    return min_freq * (max_freq / min_freq) ** (np.arange(half) / (half - 1))


def sinusoidal_embed(t, dim: int, min_freq: float = 1.0, max_freq: float = 100.0) -> np.ndarray:
    """Interleaved ``[sin(w0 t), cos(w0 t), sin(w1 t), cos(w1 t), ...]``.

    ``t`` may be a scalar or an array of shape ``(B,)``; the result has shape
    ``(dim,)`` or ``(B, dim)``.  Frequencies are geometric from ``min_freq``
    to ``max_freq``.
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dimension must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    args = t[..., None] * embedding_frequencies(dim, min_freq, max_freq)
    out = np.empty(args.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


@dataclass
class ForwardCache:
    spaces: list
    times: list
    slot_grad: list  # (space activation derivative, time embedding, time activation derivative)
    slot_out: list  # (space features, time features)
    trunk_grad: list  # activation derivative at each hidden layer
    trunk_out: list


def _check_inputs(config: MlpConfig, spaces, times):
    if len(spaces) != config.depth or len(times) != config.depth:
        raise ShapeError(f"expected {config.depth} space and time slots, got {len(spaces)} and {len(times)}")
    spaces = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in spaces]
    batch = max(s.shape[0] for s in spaces)
    for s in spaces:
        if s.shape[1] != config.space_dim or s.shape[0] not in (1, batch):
            raise ShapeError(f"space slot has shape {s.shape}, expected ({batch}, {config.space_dim})")
    out_times = []
    for t in times:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t.ndim != 1 or t.shape[0] not in (1, batch):
            raise ShapeError(f"time slot has shape {t.shape}, expected ({batch},) or scalar")
        out_times.append(t)
    return spaces, out_times, batch


def forward(params: MlpParams, spaces, times, return_cache: bool = False):
    """Evaluate the direction field.

    ``spaces`` is a list of ``depth`` arrays of shape ``(B, space_dim)`` and
    ``times`` a list of ``depth`` scalars or ``(B,)`` arrays.  Scalar times
    are embedded once and broadcast over the batch.
    """
    cfg = params.config
    spaces, times, batch = _check_inputs(cfg, spaces, times)
    if not return_cache and batch > FORWARD_BLOCK:
        def rows(a, i):
            return a[i:i + FORWARD_BLOCK] if np.ndim(a) and len(a) == batch else a
        return np.concatenate([forward(params, [rows(s, i) for s in spaces], [rows(t, i) for t in times])
                               for i in range(0, batch, FORWARD_BLOCK)])
    act, act_grad = ACTIVATIONS[cfg.activation]
    W0 = params["trunk0.W"]
    sw, ew = cfg.space_width, cfg.embed_dim

    def apply(x, store):
        if not return_cache:
            return act(x)
        y, dy = act_grad(x)
        store.append(dy)
        return y

    pre = params["trunk0.b"]
    slot_grad, slot_out = [], []
    for d in range(cfg.depth):
        rows = d * cfg.slot_width
        ds = []
        hs = apply(spaces[d] @ params[f"slot{d}.space.W"] + params[f"slot{d}.space.b"], ds)
        emb = sinusoidal_embed(times[d], ew, cfg.min_freq, cfg.max_freq)
        ht = apply(emb @ params[f"slot{d}.time.W"] + params[f"slot{d}.time.b"], ds)
        pre = pre + hs @ W0[rows:rows + sw] + ht @ W0[rows + sw:rows + sw + ew]
        if return_cache:
            slot_grad.append((ds[0], emb, ds[1]))
        slot_out.append((hs, ht))
    pre = np.broadcast_to(pre, (batch, pre.shape[-1]))

    trunk_grad, trunk_out = [], []
    n_layers = len(cfg.hidden_dims) + 1
    h = pre
    for i in range(1, n_layers):
        h = apply(h, trunk_grad)
        trunk_out.append(h)
        h = h @ params[f"trunk{i}.W"] + params[f"trunk{i}.b"]
    out = h
    if not return_cache:
        return out
    return out, ForwardCache(spaces, times, slot_grad, slot_out, trunk_grad, trunk_out)


def _reduce_rows(g, rows):
    """Sum a (B, n) gradient down to ``rows`` leading entries (1 or B)."""
    if rows == 1 and g.shape[0] != 1:
        return g.sum(axis=0, keepdims=True)
    return g


def backward(params: MlpParams, cache: ForwardCache, grad_output, wrt_spaces: bool = False):
    """Reverse pass for the scalar ``sum(output * grad_output)``.

    Returns the parameter gradient as an :class:`MlpParams`.  With
    ``wrt_spaces`` the gradients with respect to every space slot input are
    returned as well.
    """
    cfg = params.config
    batch = cache.trunk_out[0].shape[0]
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != (batch, cfg.space_dim):
        raise ShapeError(f"grad_output has shape {g.shape}, expected ({batch}, {cfg.space_dim})")
    grads = params.zeros_like()
    n_layers = len(cfg.hidden_dims) + 1

    for i in range(n_layers - 1, 0, -1):
        h_in = cache.trunk_out[i - 1]
        grads[f"trunk{i}.W"][...] = h_in.T @ g
        grads[f"trunk{i}.b"][...] = g.sum(axis=0)
        g = (g @ params[f"trunk{i}.W"].T) * cache.trunk_grad[i - 1]
    # g is now the gradient w.r.t. the first trunk pre-activation
    grads["trunk0.b"][...] = g.sum(axis=0)
    W0 = params["trunk0.W"]
    sw, ew = cfg.space_width, cfg.embed_dim
    g_spaces = []
    for d in range(cfg.depth):
        rows = d * cfg.slot_width
        ds, emb, dt = cache.slot_grad[d]
        hs, ht = cache.slot_out[d]
        gs = _reduce_rows(g, hs.shape[0])
        gt = _reduce_rows(g, ht.shape[0])
        grads["trunk0.W"][rows:rows + sw] = hs.T @ gs
        grads["trunk0.W"][rows + sw:rows + sw + ew] = ht.T @ gt

        g_hs = (gs @ W0[rows:rows + sw].T) * ds
        grads[f"slot{d}.space.W"][...] = cache.spaces[d].T @ g_hs
        grads[f"slot{d}.space.b"][...] = g_hs.sum(axis=0)
        g_ht = (gt @ W0[rows + sw:rows + sw + ew].T) * dt
        grads[f"slot{d}.time.W"][...] = emb.reshape(-1, ew).T @ g_ht
        grads[f"slot{d}.time.b"][...] = g_ht.sum(axis=0)
        if wrt_spaces:
            g_spaces.append(g_hs @ params[f"slot{d}.space.W"].T)
    if wrt_spaces:
        return grads, g_spaces
    return grads


def input_vjp(params: MlpParams, spaces, times, cotangent, slot: int) -> np.ndarray:
    """Vector-Jacobian product ``cotangent^T d(output)/d(space slot)``, row-wise."""
    _, cache = forward(params, spaces, times, return_cache=True)
    cfg = params.config
    g = np.asarray(cotangent, dtype=np.float64)
    for i in range(len(cfg.hidden_dims), 0, -1):
        g = (g @ params[f"trunk{i}.W"].T) * cache.trunk_grad[i - 1]
    rows = slot * cfg.slot_width
    g_hs = (g @ params["trunk0.W"][rows:rows + cfg.space_width].T) * cache.slot_grad[slot][0]
    return g_hs @ params[f"slot{slot}.space.W"].T


def central_difference(f, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector ``x``.

    ``x`` is perturbed in place and restored entry by entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        up = f()
        x[i] = orig - eps
        down = f()
        x[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out


def finite_diff_grad(params: MlpParams, spaces, times, grad_output, eps: float = 1e-6) -> MlpParams:
    """Central-difference gradient of ``sum(forward(...) * grad_output)``.

    Test oracle only: costs two forward passes per parameter.
    """
    grad_output = np.asarray(grad_output, dtype=np.float64)
    work = params.copy()
    loss = lambda: float(np.sum(forward(work, spaces, times) * grad_output))
    return MlpParams(params.config, central_difference(loss, work.flat, eps))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams | np.ndarray, lr: float = 1e-3, **kw) -> "AdamState":
        flat = params.flat if isinstance(params, MlpParams) else np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(flat), np.zeros_like(flat), 0, lr, **kw)


def adam_step(state: AdamState, params, grads, lr: float | None = None) -> None:
    """In-place Adam update with bias correction.

    ``params`` and ``grads`` may be :class:`MlpParams` or flat arrays.  A
    non-finite gradient raises :class:`TrainingError` tagged with the step.
    """
    p = params.flat if isinstance(params, MlpParams) else params
    g = grads.flat if isinstance(grads, MlpParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != p.shape or state.m.shape != p.shape:
        raise ShapeError(f"Adam shapes disagree: params {p.shape}, grads {g.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient", iteration=state.step)
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_checkpoint(path, params: MlpParams, meta: dict | None = None) -> None:
    """JSON container: version, network config, metadata and base64 float64 parameters.

    Keys are sorted and no timestamps are written, so identical parameters
    give byte-identical files.
    """
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "meta": meta or {},
        "n_params": int(params.total_count),
        "params_f64le": base64.b64encode(params.flat.astype("<f8").tobytes()).decode("ascii"),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r} in {path}")
    config = MlpConfig.from_dict(doc["config"])
    flat = np.frombuffer(base64.b64decode(doc["params_f64le"]), dtype="<f8").astype(np.float64)
    return MlpParams(config, flat), doc["meta"]
