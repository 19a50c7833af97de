"""Training loop, optimizer, and checkpoint persistence.

Each optimizer step consumes ``batch_size`` samples, runs one taped forward
and backward per sample, and averages gradients. Only parameters that were
touched by a sample's routed pair (plus the shared backbone) receive
gradients, and Adam keeps per-parameter moment buffers and step counters, so
pairs outside the routed set are bitwise untouched by a step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import GradTape, Tensor
from .ops import absolute, mean_all, sub
from .model import MRIPT, ModelConfig, parameter_shapes

MODES = ("pretrain", "finetune")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    pretrain_epochs: int = 5
    finetune_epochs: int = 15
    seed: int = 0
    deterministic: bool = True
    max_steps: int | None = None
    # optional early stop: halt once a full-epoch loss window drops below
    # this fraction of the first window's mean
    stop_loss_ratio: float | None = None
    stop_window: int | None = None

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "eps"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ValueError(f"{name} must be a positive number, got {v!r}")
        if self.beta1 >= 1.0 or self.beta2 >= 1.0:
            raise ValueError("beta1 and beta2 must be < 1")

    def epochs(self, mode: str) -> int:
        return self.pretrain_epochs if mode == "pretrain" else self.finetune_epochs


@dataclass
class OptimState:
    """Adam first/second moments and step counter, per parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    a = np.asarray(pred)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimState, config: TrainConfig) -> None:
    """Bias-corrected Adam update applied to exactly the keys of ``grads``."""
    b1, b2 = config.beta1, config.beta2
    for name in sorted(grads):
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient dims {g.shape} != param dims {p.data.shape} for {name}")
        t = state.t.get(name, 0) + 1
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = (1 - b1) * g
            v = (1 - b2) * g * g
        else:
            np.multiply(m, b1, out=m)
            m += (1 - b1) * g
            np.multiply(v, b2, out=v)
            v += (1 - b2) * g * g
        state.m[name], state.v[name], state.t[name] = m, v, t
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        np.sqrt(v_hat, out=v_hat)
        v_hat += config.eps
        np.multiply(m_hat, config.learning_rate, out=m_hat)
        m_hat /= v_hat
        p.data = (p.data - m_hat).astype(p.data.dtype)


def train_step(model: MRIPT, batch, state: OptimState, config: TrainConfig) -> float:
    """One optimizer step over ``batch``; returns the mean L1 loss."""
    grads: dict[str, np.ndarray] = {}
    losses = []
    inv = 1.0 / len(batch)
    for sample in batch:
        with GradTape() as tape:
            pred = model.forward(sample.input, sample.label)
            loss = mean_all(absolute(sub(pred, Tensor(sample.target, dtype=model.dtype))))
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError("training loss is non-finite; aborting")
        losses.append(value)
        tape.backward(loss, seed=np.asarray(inv, dtype=model.dtype))
        for tid, g in tape._grads.items():
            name = model.grad_name(tid)
            if name is None:
                continue
            acc = grads.get(name)
            if acc is None:
                grads[name] = g
            else:
                acc += g
    adam_step(model.params, grads, state, config)
    return float(math.fsum(losses) / len(losses))


def train(model: MRIPT, sample_stream, config: TrainConfig, mode: str = "pretrain",
          state: OptimState | None = None) -> list[float]:
    """Consume the stream in batches; returns the per-step loss trace.

    The stream defines the epoch structure (callers chain passes); training
    stops at stream end, at ``max_steps``, or at the early-stop threshold.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if config.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    state = state if state is not None else OptimState()
    trace: list[float] = []
    window = config.stop_window or config.batch_size
    first_window_mean = None
    batch = []

    def window_ready():
        nonlocal first_window_mean
        if config.stop_loss_ratio is None or len(trace) < window:
            return False
        if first_window_mean is None:
            first_window_mean = math.fsum(trace[:window]) / window
        current = math.fsum(trace[-window:]) / window
        return current < config.stop_loss_ratio * first_window_mean

    for sample in sample_stream:
        batch.append(sample)
        if len(batch) < config.batch_size:
            continue
        trace.append(train_step(model, batch, state, config))
        batch = []
        if config.max_steps is not None and len(trace) >= config.max_steps:
            return trace
        if window_ready():
            return trace
    if batch:
        trace.append(train_step(model, batch, state, config))
    return trace


def save_loss_trace(path, trace: list[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("step,loss\n")
        for i, v in enumerate(trace):
            f.write(f"{i},{v:.8f}\n")


# -- checkpoint format ----------------------------------------------------
#
# u32 little-endian header length, UTF-8 JSON header, then contiguous
# little-endian float32 blobs. The header carries the model config, run
# metadata, integer optimizer step counters, and a tensor directory of
# (name, offset, dims) with offsets relative to the payload start.

_CKPT_VERSION = 1


class Checkpoint(NamedTuple):
    """A deserialized checkpoint: rebuilt model plus run metadata."""

    model: MRIPT
    optim: OptimState | None
    step: int
    mode: str


class CheckpointError(IOError):
    pass


class MissingTensorError(CheckpointError):
    pass


class DimMismatchError(CheckpointError):
    pass


def save_checkpoint(path, model: MRIPT, state: OptimState | None = None,
                    step: int = 0, mode: str = "pretrain") -> None:
    if model.dtype != np.float32:
        raise ValueError("only float32 models are checkpointed")
    entries: list[tuple[str, np.ndarray]] = [(n, model.params[n].data)
                                             for n in model.param_names]
    if state is not None:
        for name in sorted(state.m):
            entries.append((f"optim.m.{name}", state.m[name]))
            entries.append((f"optim.v.{name}", state.v[name]))
    directory = []
    offset = 0
    for name, arr in entries:
        directory.append({"name": name, "offset": offset, "dims": list(arr.shape)})
        offset += arr.size * 4
    header = {
        "format": "mript-checkpoint",
        "version": _CKPT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "mode": mode,
        "has_optim": state is not None,
        "optim_t": dict(sorted(state.t.items())) if state is not None else {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise CheckpointError(f"{path}: file too short for a header")
    (hlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + hlen:
        raise CheckpointError(f"{path}: header cut short")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    if header.get("format") != "mript-checkpoint" or header.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{_CKPT_VERSION} checkpoint")
    config = ModelConfig.from_dict(header["config"])
    payload = raw[4 + hlen:]
    index = {e["name"]: e for e in header["tensors"]}

    def read_tensor(name: str, expected_dims: tuple[int, ...]) -> np.ndarray:
        entry = index.get(name)
        if entry is None:
            raise MissingTensorError(f"{path}: tensor {name!r} missing")
        dims = tuple(entry["dims"])
        if dims != tuple(expected_dims):
            raise DimMismatchError(
                f"{path}: tensor {name!r} has dims {dims}, expected {tuple(expected_dims)}")
        count = int(np.prod(dims))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {name!r}")
        return np.frombuffer(payload, dtype="<f4", count=count, offset=start) \
            .reshape(dims).astype(np.float32, copy=True)

    model = MRIPT(config)
    for name, shape in parameter_shapes(config):
        model.params[name].data = read_tensor(name, shape)
    state = None
    if header.get("has_optim"):
        state = OptimState()
        state.t = {k: int(v) for k, v in header.get("optim_t", {}).items()}
        for name in state.t:
            if name not in model.params:
                raise MissingTensorError(f"{path}: optimizer slot for unknown param {name!r}")
            dims = model.params[name].data.shape
            state.m[name] = read_tensor(f"optim.m.{name}", dims)
            state.v[name] = read_tensor(f"optim.v.{name}", dims)
    return Checkpoint(model, state, int(header.get("step", 0)),
                      str(header.get("mode", "pretrain")))
