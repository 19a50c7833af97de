"""Image I/O, preprocessing, synthetic phantoms, and the sample pipeline.

Images move through the package as float32 numpy arrays of dims [1, H, W]
with values in [0, 1]. The native serialization is a small binary raster
format (magic ``MRIT``); PNG import/export exists for inspection.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .degradation import MaskSpec, degrade, make_mask, with_seed

_MAGIC = b"MRIT"
_VERSION = 1
_DTYPE_F32 = 1

VALID_SPLITS = ("train", "val", "test")


class RasterFormatError(IOError):
    """Base class for malformed raster files."""


class BadMagicError(RasterFormatError):
    pass


class VersionError(RasterFormatError):
    pass


class TruncatedError(RasterFormatError):
    pass


def save_raster(path, arr: np.ndarray) -> None:
    """Write a float32 array: magic, version byte, dtype byte, ndim byte,
    little-endian u32 dims, then the row-major little-endian payload."""
    a = np.asarray(arr)
    if a.dtype != np.float32:
        raise TypeError(f"raster payload must be float32, got {a.dtype}")
    if a.ndim < 1 or a.ndim > 255:
        raise ValueError(f"unsupported ndim {a.ndim}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BBB", _VERSION, _DTYPE_F32, a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not a raster file (bad magic)")
    if len(raw) < 7:
        raise TruncatedError(f"{path}: header cut short")
    version, dtype_code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != _VERSION:
        raise VersionError(f"{path}: raster version {version}, expected {_VERSION}")
    if dtype_code != _DTYPE_F32:
        raise VersionError(f"{path}: unsupported dtype code {dtype_code}")
    header_end = 7 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedError(f"{path}: dim list cut short")
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    if ndim == 0 or any(d == 0 for d in dims):
        raise RasterFormatError(f"{path}: invalid dims {dims}")
    count = int(np.prod(dims))
    expected = header_end + 4 * count
    if len(raw) < expected:
        raise TruncatedError(f"{path}: payload has {len(raw) - header_end} bytes, "
                             f"expected {4 * count}")
    if len(raw) > expected:
        raise TruncatedError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return data.reshape(dims).astype(np.float32, copy=True)


def save_png(path, img: np.ndarray) -> None:
    """8-bit grayscale export; values are clamped to [0, 1] first."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected [1, H, W] or [H, W], got dims {a.shape}")
    q = np.clip(a, 0.0, 1.0)
    Image.fromarray((q * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_png(path) -> np.ndarray:
    """Read a PNG as a [1, H, W] float32 image scaled to [0, 1].

    8-bit and 16-bit grayscale map through their full code range; color
    images are converted to luminance first.
    """
    with Image.open(path) as im:
        if im.mode == "I;16":
            a = np.asarray(im, dtype=np.float32) / 65535.0
        elif im.mode == "I":
            a = np.asarray(im, dtype=np.float32) / 65535.0
        elif im.mode == "L":
            a = np.asarray(im, dtype=np.float32) / 255.0
        else:
            a = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return a[None, :, :]


def load_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return load_png(path)
    arr = load_raster(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ValueError(f"{path}: raster dims {arr.shape} are not a single-channel image")
    return arr


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    a = np.asarray(img)
    h, w = a.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"cannot crop {size} from {h} x {w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return np.ascontiguousarray(a[..., top:top + size, left:left + size])


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel-aligned centers."""
    a = np.asarray(img, dtype=np.float32)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    h, w = a.shape[-2:]

    def axis_coords(n_in: int, n_out: int):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (c - lo).astype(np.float32)

    y0, y1, wy = axis_coords(h, size)
    x0, x1, wx = axis_coords(w, size)
    rows = a[:, y0, :] * (1.0 - wy)[None, :, None] + a[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1.0 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant image maps to zeros."""
    a = np.asarray(img, dtype=np.float32)
    lo = float(a.min())
    hi = float(a.max())
    if hi <= lo:
        return np.zeros_like(a)
    return ((a - lo) / (hi - lo)).astype(np.float32)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic ellipse phantom."""

    seed: int
    size: int = 64
    n_ellipses: tuple[int, int] = (4, 8)
    background: float = 0.08

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"phantom size must be at least 16, got {self.size}")
        lo, hi = self.n_ellipses
        if lo < 1 or hi < lo:
            raise ValueError(f"bad ellipse count range {self.n_ellipses}")


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Deterministic [1, S, S] float32 phantom in [0, 1].

    Overlapping rotated ellipses of random intensity on a faint smooth
    background, min-max normalized.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    s = spec.size
    n = int(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    canvas = np.zeros((s, s), dtype=np.float64)
    for _ in range(n):
        cy, cx = rng.uniform(0.22, 0.78, size=2)
        ay, ax = rng.uniform(0.05, 0.30, size=2)
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.3, 1.0)
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        canvas += amp * (((u / ay) ** 2 + (v / ax) ** 2) <= 1.0)
    coarse = rng.normal(0.0, 1.0, size=(4, 4)).astype(np.float32) * spec.background
    canvas += resize_bilinear(coarse, s).astype(np.float64)
    return normalize_minmax(canvas)[None]


def phantom_set(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Phantoms for consecutive seeds seed .. seed + count - 1."""
    return [generate_phantom(PhantomSpec(seed=seed + i, size=size)) for i in range(count)]


class ManifestEntry(NamedTuple):
    path: str
    split: str


@dataclass
class Manifest:
    """Dataset index: file paths with train/val/test assignment."""

    entries: list[ManifestEntry]
    root: str = "."

    def paths(self, split: str | None = None) -> list[str]:
        return [os.path.join(self.root, e.path) for e in self.entries
                if split is None or e.split == split]


def write_manifest(path, entries: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "split"])
        for p, split in entries:
            writer.writerow([p, split])


def load_manifest(path) -> Manifest:
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest") from None
        if header != ["path", "split"]:
            raise ValueError(f"{path}: manifest header must be path,split")
        entries = []
        seen = set()
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            p, split = row
            if split not in VALID_SPLITS:
                raise ValueError(f"{path}: unknown split {split!r}")
            if p in seen:
                raise ValueError(f"{path}: duplicate path {p!r}")
            seen.add(p)
            if not os.path.exists(os.path.join(root, p)):
                raise FileNotFoundError(f"{path}: missing file {p!r}")
            entries.append(ManifestEntry(p, split))
    return Manifest(entries, root)


class Sample(NamedTuple):
    """One training/eval item: degraded input, clean target, task label."""

    input: np.ndarray
    target: np.ndarray
    label: object


def dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """Apply one of the 8 symmetries of the square (rotations and mirrors).

    ``k`` in 0..3 rotates by 90k degrees; ``k`` in 4..7 mirrors along the
    last axis first.  Acts on the trailing two axes; square inputs keep
    their shape.
    """
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index must be in 0..7, got {k}")
    a = np.asarray(image)
    if a.ndim < 2:
        raise ValueError("dihedral needs at least 2 dimensions")
    if k >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, k % 4, axes=(-2, -1)))


_AUGMENTS = (None, "dihedral")


def build_samples(sources: Sequence[np.ndarray], task_set: Sequence[MaskSpec],
                  seed: int, augment: str | None = None) -> Iterator[Sample]:
    """One pass over ``sources``; each image draws one task uniformly.

    Per-sample randomness (task pick, mask draw, equispaced comb offset when
    the task leaves it unset, augmentation pick) derives from ``(seed,
    index)`` so any sample is reproducible in isolation.  With
    ``augment="dihedral"`` each drawn image is passed through a uniformly
    chosen symmetry of the square before degradation, multiplying the
    effective variety of a small clean-image pool by up to 8 without
    touching its content distribution.
    """
    from .model import TaskLabel

    if augment not in _AUGMENTS:
        raise ValueError(f"augment must be one of {_AUGMENTS}, got {augment!r}")
    if not task_set:
        raise ValueError("task_set is empty")
    for i, img in enumerate(sources):
        a = np.asarray(img)
        if a.ndim != 3 or a.shape[0] != 1:
            raise ValueError(f"source {i} has dims {a.shape}, expected [1, H, W]")
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        task = task_set[int(rng.integers(len(task_set)))]
        mask_seed = int(rng.integers(2 ** 31))
        offset = None
        if task.family.value == "equispaced" and task.offset is None:
            offset = int(rng.integers(a.shape[-1]))
        if augment == "dihedral":
            a = dihedral(a, int(rng.integers(8)))
        spec = with_seed(task, mask_seed, offset)
        mask = make_mask(spec, a.shape[-2:])
        yield Sample(degrade(a, mask), a.astype(np.float32, copy=False),
                     TaskLabel(task.family, task.acceleration))


def epoch_stream(sources: Sequence[np.ndarray], task_set: Sequence[MaskSpec],
                 seed: int, epochs: int,
                 augment: str | None = None) -> Iterator[Sample]:
    """Chain ``epochs`` passes, each with fresh per-image task draws."""
    for e in range(epochs):
        yield from build_samples(sources, task_set, seed=seed * 1000003 + e,
                                 augment=augment)
