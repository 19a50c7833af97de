"""Multi-head/tail reconstruction transformer with prompt conditioning.

One convolutional head and one tail exist per routed task pair; the windowed
self-attention encoder, the prompt encoder, and the lightweight decoder are
shared across all tasks. Routing picks the pair for a task label: exact
acceleration match first, otherwise the nearest trained ratio above (clamped
to the largest), and unseen mask families fall back to the Cartesian random
pair.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterable, Iterator

import numpy as np

from .autodiff import Tensor
from . import ops
from .degradation import MaskFamily

ALL_FAMILIES = (
    MaskFamily.CARTESIAN_RANDOM,
    MaskFamily.CARTESIAN_EQUISPACED,
    MaskFamily.GAUSSIAN_1D,
    MaskFamily.GAUSSIAN_2D,
)

VARIANTS = ("type", "level", "split")

# Prompt tokens are a [2, D] Tensor: row 0 conditions on the mask family,
# row 1 on the acceleration ratio.
PromptTokens = Tensor


@dataclass(frozen=True)
class TaskLabel:
    """What degradation produced the input: mask family plus acceleration."""

    family: MaskFamily
    acceleration: float

    def __post_init__(self):
        object.__setattr__(self, "family", MaskFamily(self.family))
        object.__setattr__(self, "acceleration", float(self.acceleration))
        if not np.isfinite(self.acceleration) or self.acceleration <= 1.0:
            raise ValueError(f"acceleration must be > 1, got {self.acceleration}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    window_size: int = 4
    shift_size: int = 2
    embed_dim: int = 96
    num_heads: int = 4
    encoder_depth: int = 6
    decoder_depth: int = 2
    mlp_ratio: float = 4.0
    head_channels: int = 32
    variant: str = "level"
    families: tuple[MaskFamily, ...] = ALL_FAMILIES
    ratios: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "families",
                           tuple(MaskFamily(f) for f in self.families))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        grid = self.image_size // self.patch_size
        if grid % self.window_size:
            raise ValueError("token grid must tile evenly into windows")
        if not (0 <= self.shift_size < self.window_size):
            raise ValueError("shift_size must satisfy 0 <= shift < window_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder and decoder need at least one block")
        if len(set(self.families)) != len(self.families) or not self.families:
            raise ValueError("families must be non-empty and unique")
        if len(set(self.ratios)) != len(self.ratios) or not self.ratios:
            raise ValueError("ratios must be non-empty and unique")
        if any(r <= 1.0 for r in self.ratios):
            raise ValueError("ratios must all be > 1")
        if sorted(self.ratios) != list(self.ratios):
            raise ValueError("ratios must be ascending")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = [f.value for f in self.families]
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["families"] = tuple(MaskFamily(f) for f in d["families"])
        d["ratios"] = tuple(d["ratios"])
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Default configuration sized for a single CPU core."""
    return ModelConfig(**overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest legal geometry; used by gradient checks."""
    base = dict(image_size=16, patch_size=4, window_size=2, shift_size=1,
                embed_dim=16, num_heads=2, encoder_depth=2, decoder_depth=2,
                mlp_ratio=2.0, head_channels=8,
                families=(MaskFamily.CARTESIAN_RANDOM, MaskFamily.CARTESIAN_EQUISPACED),
                ratios=(2.0, 4.0), variant="split")
    base.update(overrides)
    return ModelConfig(**base)


def paper_config(**overrides) -> ModelConfig:
    """Full-scale geometry (224 px, 24 encoder blocks); parameter counting
    and shape checks only at desk scale."""
    base = dict(image_size=224, patch_size=16, window_size=7, shift_size=3,
                embed_dim=768, num_heads=12, encoder_depth=24, decoder_depth=2,
                mlp_ratio=4.0, head_channels=64)
    base.update(overrides)
    return ModelConfig(**base)


def pair_keys(config: ModelConfig) -> tuple[str, ...]:
    """Routing keys of the head/tail bank, by variant."""
    if config.variant == "type":
        return tuple(f"x{r:g}" for r in config.ratios)
    if config.variant == "level":
        return tuple(f.value for f in config.families)
    return tuple(f"{f.value}-x{r:g}" for f in config.families for r in config.ratios)


def resolve_ratio(acceleration: float, trained: Iterable[float]) -> float:
    """Exact match, else smallest trained ratio above, else the largest."""
    trained = sorted(trained)
    for r in trained:
        if abs(r - acceleration) < 1e-9:
            return r
    higher = [r for r in trained if r > acceleration]
    return higher[0] if higher else trained[-1]


def resolve_family(family: MaskFamily, trained: Iterable[MaskFamily]) -> MaskFamily:
    trained = tuple(trained)
    family = MaskFamily(family)
    if family in trained:
        return family
    if MaskFamily.CARTESIAN_RANDOM in trained:
        return MaskFamily.CARTESIAN_RANDOM
    return trained[0]


def _head_shapes(key: str, hc: int) -> Iterator[tuple[str, tuple[int, ...]]]:
    yield f"head.{key}.conv_in.w", (hc, 1, 3, 3)
    yield f"head.{key}.conv_in.b", (hc,)
    for r in (1, 2):
        for c in (1, 2):
            yield f"head.{key}.res{r}.conv{c}.w", (hc, hc, 5, 5)
            yield f"head.{key}.res{r}.conv{c}.b", (hc,)


def _tail_shapes(key: str, cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    up = cfg.patch_size ** 2 * cfg.head_channels
    yield f"tail.{key}.up.w", (up, cfg.embed_dim, 3, 3)
    yield f"tail.{key}.up.b", (up,)
    yield f"tail.{key}.out.w", (1, cfg.head_channels, 3, 3)
    yield f"tail.{key}.out.b", (1,)


def _attn_shapes(prefix: str, d: int) -> Iterator[tuple[str, tuple[int, ...]]]:
    for part in ("q", "k", "v", "out"):
        yield f"{prefix}.{part}.w", (d, d)
        yield f"{prefix}.{part}.b", (d,)


def _norm_shapes(prefix: str, d: int) -> Iterator[tuple[str, tuple[int, ...]]]:
    yield f"{prefix}.g", (d,)
    yield f"{prefix}.b", (d,)


def parameter_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Canonical (name, dims) enumeration; init, checkpointing, and counting
    all derive from this single source."""
    d = config.embed_dim
    for key in pair_keys(config):
        yield from _head_shapes(key, config.head_channels)
    yield "patch.proj.w", (d, config.head_channels, config.patch_size, config.patch_size)
    yield "patch.proj.b", (d,)
    yield "patch.pos", (config.token_count, d)
    yield "prompt.families", (len(config.families), d)
    yield "prompt.ratios", (len(config.ratios), d)
    yield "prompt.proj.w", (d, d)
    yield "prompt.proj.b", (d,)
    w2 = (2 * config.window_size - 1) ** 2
    for i in range(config.encoder_depth):
        yield from _norm_shapes(f"enc{i}.norm1", d)
        yield from _attn_shapes(f"enc{i}.attn", d)
        yield f"enc{i}.attn.bias", (w2, config.num_heads)
        yield from _norm_shapes(f"enc{i}.norm2", d)
        yield f"enc{i}.mlp.fc1.w", (config.mlp_hidden, d)
        yield f"enc{i}.mlp.fc1.b", (config.mlp_hidden,)
        yield f"enc{i}.mlp.fc2.w", (d, config.mlp_hidden)
        yield f"enc{i}.mlp.fc2.b", (d,)
    for j in range(config.decoder_depth):
        yield from _norm_shapes(f"dec{j}.self.norm", d)
        yield from _attn_shapes(f"dec{j}.self", d)
        yield from _norm_shapes(f"dec{j}.read.norm_q", d)
        yield from _norm_shapes(f"dec{j}.read.norm_kv", d)
        yield from _attn_shapes(f"dec{j}.read", d)
        yield from _norm_shapes(f"dec{j}.mlp.norm", d)
        yield f"dec{j}.mlp.fc1.w", (config.mlp_hidden, d)
        yield f"dec{j}.mlp.fc1.b", (config.mlp_hidden,)
        yield f"dec{j}.mlp.fc2.w", (d, config.mlp_hidden)
        yield f"dec{j}.mlp.fc2.b", (d,)
        yield from _norm_shapes(f"dec{j}.write.norm_q", d)
        yield from _norm_shapes(f"dec{j}.write.norm_kv", d)
        yield from _attn_shapes(f"dec{j}.write", d)
    for key in pair_keys(config):
        yield from _tail_shapes(key, config)


def _group_of(name: str) -> str:
    head = name.split(".")[0]
    if head.startswith("enc"):
        return "encoder"
    if head.startswith("dec"):
        return "decoder"
    return {"head": "heads", "tail": "tails", "patch": "patch",
            "prompt": "prompt"}[head]


def param_count(config: ModelConfig) -> dict[str, int]:
    """Parameter totals per group, computed from dims alone."""
    counts = {"heads": 0, "tails": 0, "patch": 0, "prompt": 0,
              "encoder": 0, "decoder": 0}
    for name, shape in parameter_shapes(config):
        counts[_group_of(name)] += int(np.prod(shape))
    counts["total"] = sum(counts.values())
    counts["pairs"] = len(pair_keys(config))
    return counts


@dataclass
class HeadTailBank:
    """Views of the per-pair parameters; storage stays in the model dict."""

    keys: tuple[str, ...]
    heads: dict[str, dict[str, Tensor]]
    tails: dict[str, dict[str, Tensor]]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".b"):
        return np.zeros(shape)
    return _trunc_normal(rng, shape, std=0.02)


def _relative_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]
    idx = (rel[..., 0] + window - 1) * (2 * window - 1) + (rel[..., 1] + window - 1)
    return idx.reshape(-1).astype(np.int64)


def _shifted_window_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """Additive [nW, 1, w^2, w^2] bias hiding pairs that only share a window
    because of the cyclic shift; 0 within a region, -1e9 across."""
    region = np.zeros((grid, grid), dtype=np.int32)
    marker = 0
    spans = (slice(0, grid - window), slice(grid - window, grid - shift),
             slice(grid - shift, grid))
    for hs in spans:
        for ws in spans:
            region[hs, ws] = marker
            marker += 1
    nw = grid // window
    win = region.reshape(nw, window, nw, window).transpose(0, 2, 1, 3)
    win = win.reshape(nw * nw, window * window)
    blocked = win[:, :, None] != win[:, None, :]
    return np.where(blocked, -1e9, 0.0).astype(np.float32)[:, None, :, :]


class MRIPT:
    """The reconstruction model: parameter store plus the forward pipeline."""

    def __init__(self, config: ModelConfig, init_seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(init_seed))
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config):
            value = _init_value(name, shape, rng).astype(self.dtype)
            self.params[name] = Tensor(value, requires_grad=True, dtype=self.dtype)
        self.param_names: tuple[str, ...] = tuple(self.params)
        self._name_of = {id(t): n for n, t in self.params.items()}

        g, w = config.grid_size, config.window_size
        self._rel_idx = _relative_index(w)
        # single-window grids cannot shift; wrap regions would be spurious
        self._shift = config.shift_size if g > w else 0
        self._shift_mask = _shifted_window_mask(g, w, self._shift) if self._shift else None
        self.bank = HeadTailBank(
            keys=pair_keys(config),
            heads={k: self._section(f"head.{k}.") for k in pair_keys(config)},
            tails={k: self._section(f"tail.{k}.") for k in pair_keys(config)},
        )

    def _section(self, prefix: str) -> dict[str, Tensor]:
        return {n[len(prefix):]: t for n, t in self.params.items() if n.startswith(prefix)}

    def grad_name(self, tensor_id: int) -> str | None:
        return self._name_of.get(tensor_id)

    # -- routing ---------------------------------------------------------

    def route(self, label: TaskLabel) -> str:
        cfg = self.config
        ratio = resolve_ratio(label.acceleration, cfg.ratios)
        family = resolve_family(label.family, cfg.families)
        if cfg.variant == "type":
            return f"x{ratio:g}"
        if cfg.variant == "level":
            return family.value
        return f"{family.value}-x{ratio:g}"

    # -- pipeline stages --------------------------------------------------

    def head_forward(self, key: str, image: Tensor) -> Tensor:
        p = self.params
        x = ops.conv2d(image, p[f"head.{key}.conv_in.w"], p[f"head.{key}.conv_in.b"], pad=1)
        for r in (1, 2):
            y = ops.conv2d(x, p[f"head.{key}.res{r}.conv1.w"], p[f"head.{key}.res{r}.conv1.b"], pad=2)
            y = ops.relu(y)
            y = ops.conv2d(y, p[f"head.{key}.res{r}.conv2.w"], p[f"head.{key}.res{r}.conv2.b"], pad=2)
            x = ops.add(x, y)
        return x

    def patchify(self, feats: Tensor) -> Tensor:
        cfg = self.config
        p = self.params
        emb = ops.conv2d(feats, p["patch.proj.w"], p["patch.proj.b"],
                         stride=cfg.patch_size)
        tokens = ops.transpose(ops.reshape(emb, (cfg.embed_dim, cfg.token_count)), (1, 0))
        return ops.add(tokens, p["patch.pos"])

    def unpatchify_to_grid(self, tokens: Tensor) -> Tensor:
        cfg = self.config
        g = cfg.grid_size
        return ops.reshape(ops.transpose(tokens, (1, 0)), (cfg.embed_dim, g, g))

    def encode_prompt(self, label: TaskLabel) -> PromptTokens:
        cfg = self.config
        p = self.params
        fam = resolve_family(label.family, cfg.families)
        ratio = resolve_ratio(label.acceleration, cfg.ratios)
        fi = cfg.families.index(fam)
        ri = cfg.ratios.index(ratio)
        rows = ops.concat([ops.take_rows(p["prompt.families"], np.array([fi])),
                           ops.take_rows(p["prompt.ratios"], np.array([ri]))], axis=0)
        return ops.linear(rows, p["prompt.proj.w"], p["prompt.proj.b"])

    def _attn(self, prefix: str, q: Tensor, kv: Tensor, mask=None) -> Tensor:
        p = self.params
        qh = ops.linear(q, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
        kh = ops.linear(kv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
        vh = ops.linear(kv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
        o = ops.attention(qh, kh, vh, self.config.num_heads, mask=mask)
        return ops.linear(o, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])

    def _window_partition(self, t: Tensor) -> Tensor:
        g, w, d = self.config.grid_size, self.config.window_size, self.config.embed_dim
        nw = g // w
        t = ops.reshape(t, (nw, w, nw, w, d))
        t = ops.transpose(t, (0, 2, 1, 3, 4))
        return ops.reshape(t, (nw * nw, w * w, d))

    def _window_merge(self, t: Tensor) -> Tensor:
        g, w, d = self.config.grid_size, self.config.window_size, self.config.embed_dim
        nw = g // w
        t = ops.reshape(t, (nw, nw, w, w, d))
        t = ops.transpose(t, (0, 2, 1, 3, 4))
        return ops.reshape(t, (g, g, d))

    def _wmsa(self, tokens: Tensor, block: int, shifted: bool) -> Tensor:
        cfg = self.config
        g, w, d = cfg.grid_size, cfg.window_size, cfg.embed_dim
        bias = ops.take_rows(self.params[f"enc{block}.attn.bias"], self._rel_idx)
        bias = ops.transpose(ops.reshape(bias, (w * w, w * w, cfg.num_heads)), (2, 0, 1))
        grid = ops.reshape(tokens, (g, g, d))
        if shifted:
            grid = ops.roll(grid, (-self._shift, -self._shift), (0, 1))
            mask = ops.add(bias, Tensor(self._shift_mask.astype(self.dtype), dtype=self.dtype))
        else:
            mask = bias
        win = self._window_partition(grid)
        out = self._attn(f"enc{block}.attn", win, win, mask=mask)
        grid = self._window_merge(out)
        if shifted:
            grid = ops.roll(grid, (self._shift, self._shift), (0, 1))
        return ops.reshape(grid, (g * g, d))

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ops.gelu(ops.linear(x, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
        return ops.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])

    def encoder_forward(self, tokens: Tensor) -> Tensor:
        p = self.params
        x = tokens
        for i in range(self.config.encoder_depth):
            shifted = (i % 2 == 1) and self._shift > 0
            a = ops.layer_norm(x, p[f"enc{i}.norm1.g"], p[f"enc{i}.norm1.b"])
            x = ops.add(x, self._wmsa(a, i, shifted))
            m = ops.layer_norm(x, p[f"enc{i}.norm2.g"], p[f"enc{i}.norm2.b"])
            x = ops.add(x, self._mlp(f"enc{i}.mlp", m))
        return x

    def decoder_forward(self, tokens: Tensor, prompts: PromptTokens) -> Tensor:
        p = self.params
        t, pr = tokens, prompts
        for j in range(self.config.decoder_depth):
            a = ops.layer_norm(pr, p[f"dec{j}.self.norm.g"], p[f"dec{j}.self.norm.b"])
            pr = ops.add(pr, self._attn(f"dec{j}.self", a, a))
            q = ops.layer_norm(pr, p[f"dec{j}.read.norm_q.g"], p[f"dec{j}.read.norm_q.b"])
            kv = ops.layer_norm(t, p[f"dec{j}.read.norm_kv.g"], p[f"dec{j}.read.norm_kv.b"])
            pr = ops.add(pr, self._attn(f"dec{j}.read", q, kv))
            m = ops.layer_norm(pr, p[f"dec{j}.mlp.norm.g"], p[f"dec{j}.mlp.norm.b"])
            pr = ops.add(pr, self._mlp(f"dec{j}.mlp", m))
            q = ops.layer_norm(t, p[f"dec{j}.write.norm_q.g"], p[f"dec{j}.write.norm_q.b"])
            kv = ops.layer_norm(pr, p[f"dec{j}.write.norm_kv.g"], p[f"dec{j}.write.norm_kv.b"])
            t = ops.add(t, self._attn(f"dec{j}.write", q, kv))
        return t

    def tail_forward(self, key: str, grid_feats: Tensor) -> Tensor:
        cfg = self.config
        p = self.params
        x = ops.conv2d(grid_feats, p[f"tail.{key}.up.w"], p[f"tail.{key}.up.b"], pad=1)
        x = ops.pixel_shuffle(x, cfg.patch_size)
        x = ops.relu(x)
        return ops.conv2d(x, p[f"tail.{key}.out.w"], p[f"tail.{key}.out.b"], pad=1)

    def forward(self, image, label: TaskLabel) -> Tensor:
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=self.dtype)
        if x.dtype != self.dtype:
            x = Tensor(x.data, requires_grad=x.requires_grad, dtype=self.dtype)
        expected = (1, cfg.image_size, cfg.image_size)
        if x.dims != expected:
            raise ValueError(f"expected image dims {expected}, got {x.dims}")
        key = self.route(label)
        feats = self.head_forward(key, x)
        tokens = self.patchify(feats)
        tokens = self.encoder_forward(tokens)
        tokens = self.decoder_forward(tokens, self.encode_prompt(label))
        return self.tail_forward(key, self.unpatchify_to_grid(tokens))
