"""K-space undersampling: mask construction and the degradation operator.

Masks live on a centered k-space grid (DC at index ``W // 2`` after
fftshift). Column families keep whole columns; the 2-d Gaussian family keeps
individual points. Every family always keeps DC, never keeps everything, and
hits its kept-count target exactly, so the achieved acceleration is a pure
function of the spec and the grid size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class MaskFamily(str, Enum):
    CARTESIAN_RANDOM = "random"
    CARTESIAN_EQUISPACED = "equispaced"
    GAUSSIAN_1D = "gaussian1d"
    GAUSSIAN_2D = "gaussian2d"

    @property
    def is_1d(self) -> bool:
        return self is not MaskFamily.GAUSSIAN_2D


class MaskError(ValueError):
    """Invalid or infeasible mask specification."""


def _round_away(x: float) -> int:
    # round half away from zero; python round() is half-to-even
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    """Sampling-pattern description, independent of grid size.

    ``center_fraction`` of None picks the family default: 0.32/acceleration
    for the Cartesian families, 0 for the Gaussian families (which force DC
    instead of a center block). ``offset`` shifts the equispaced comb; None
    means 0 at mask time and is randomized per sample by the data pipeline.
    """

    family: MaskFamily
    acceleration: float
    center_fraction: float | None = None
    sigma_fraction: float = 1.0 / 6.0
    offset: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", MaskFamily(self.family))
        if not np.isfinite(self.acceleration) or self.acceleration <= 1.0:
            raise MaskError(f"acceleration must be > 1, got {self.acceleration}")
        if self.center_fraction is not None and not (0.0 <= self.center_fraction < 1.0):
            raise MaskError(f"center_fraction must be in [0, 1), got {self.center_fraction}")
        if self.sigma_fraction <= 0.0:
            raise MaskError(f"sigma_fraction must be positive, got {self.sigma_fraction}")
        if self.offset is not None and self.offset < 0:
            raise MaskError(f"offset must be >= 0, got {self.offset}")

    def resolved_center_fraction(self) -> float:
        if self.center_fraction is not None:
            return self.center_fraction
        if self.family in (MaskFamily.CARTESIAN_RANDOM, MaskFamily.CARTESIAN_EQUISPACED):
            return 0.32 / self.acceleration
        return 0.0


@dataclass(frozen=True)
class Mask:
    """Boolean keep-raster plus the spec that generated it (None when the
    raster was loaded from a file)."""

    kept: np.ndarray
    spec: MaskSpec | None = None

    def to_float(self) -> np.ndarray:
        return self.kept.astype(np.float32)

    @property
    def dims(self) -> tuple[int, int]:
        return self.kept.shape


def achieved_acceleration(mask: Mask) -> float:
    h, w = mask.kept.shape
    kept = int(mask.kept.sum())
    if kept == 0:
        raise MaskError("mask keeps nothing")
    return (h * w) / kept


def _center_columns(width: int, n_center: int) -> np.ndarray:
    if n_center == 0:
        return np.empty(0, dtype=np.int64)
    pad = (width - n_center + 1) // 2
    return np.arange(pad, pad + n_center, dtype=np.int64)


def _column_mask(width: int, cols: np.ndarray, height: int) -> np.ndarray:
    kept = np.zeros(width, dtype=bool)
    kept[cols] = True
    return np.broadcast_to(kept, (height, width)).copy()


def _gumbel_top_k(log_weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # top-k of log w + Gumbel noise draws k items without replacement with
    # Plackett-Luce probabilities, identical to successive renormalized draws
    if k == 0:
        return np.empty(0, dtype=np.int64)
    keys = log_weights + rng.gumbel(size=log_weights.shape)
    part = np.argpartition(keys, len(keys) - k)[len(keys) - k:]
    return np.sort(part)


def make_mask(spec: MaskSpec, dims: tuple[int, int]) -> Mask:
    """Generate the boolean mask for ``spec`` on an H x W grid.

    Kept-count targets use round-half-away-from-zero and are capped one short
    of everything so no legal spec degenerates to an all-ones mask.
    """
    h, w = dims
    if h < 16 or w < 16:
        raise MaskError(f"grid dims must be at least 16 x 16, got {dims}")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    dc_col = w // 2

    if spec.family is MaskFamily.GAUSSIAN_2D:
        target = min(_round_away(h * w / spec.acceleration), h * w - 1)
        if target < 1:
            raise MaskError("kept-count target is zero")
        dc_flat = (h // 2) * w + dc_col
        sig_r = spec.sigma_fraction * h
        sig_c = spec.sigma_fraction * w
        rr = (np.arange(h) - h / 2.0) ** 2 / (2.0 * sig_r * sig_r)
        cc = (np.arange(w) - w / 2.0) ** 2 / (2.0 * sig_c * sig_c)
        logw = (-(rr[:, None] + cc[None, :])).reshape(-1)
        cands = np.delete(np.arange(h * w, dtype=np.int64), dc_flat)
        chosen = _gumbel_top_k(logw[cands], target - 1, rng)
        kept = np.zeros(h * w, dtype=bool)
        kept[dc_flat] = True
        kept[cands[chosen]] = True
        return Mask(kept.reshape(h, w), spec)

    target = min(_round_away(w / spec.acceleration), w - 1)
    if target < 1:
        raise MaskError("kept-column target is zero")
    n_center = _round_away(spec.resolved_center_fraction() * w)
    if n_center > target:
        raise MaskError(
            f"center block of {n_center} columns exceeds the {target}-column budget")
    center = _center_columns(w, n_center)

    if spec.family is MaskFamily.CARTESIAN_EQUISPACED:
        others = np.setdiff1d(np.arange(w, dtype=np.int64), center, assume_unique=True)
        m = len(others)
        k = target - n_center
        offset = (spec.offset or 0) % m if m else 0
        picks = others[(offset + (np.arange(k) * m) // k) % m] if k else np.empty(0, dtype=np.int64)
        cols = np.union1d(center, picks)
        if dc_col not in cols:
            # no center block pinned DC; slide the whole comb onto it
            shift = dc_col - cols[np.argmin(np.abs(cols - dc_col))]
            cols = np.sort((cols + shift) % w)
        return Mask(_column_mask(w, cols, h), spec)

    # random column families: uniform or gaussian-weighted draws without
    # replacement over the non-pinned columns
    pinned = center if n_center else np.array([dc_col], dtype=np.int64)
    budget = target - len(pinned)
    if budget < 0:
        raise MaskError("forced columns exceed the sampling budget")
    cands = np.setdiff1d(np.arange(w, dtype=np.int64), pinned, assume_unique=True)
    if spec.family is MaskFamily.CARTESIAN_RANDOM:
        picks = rng.choice(cands, size=budget, replace=False) if budget else cands[:0]
    else:  # GAUSSIAN_1D
        sig = spec.sigma_fraction * w
        logw = -((cands - w / 2.0) ** 2) / (2.0 * sig * sig)
        picks = cands[_gumbel_top_k(logw, budget, rng)]
    cols = np.union1d(pinned, picks)
    return Mask(_column_mask(w, cols, h), spec)


def with_seed(spec: MaskSpec, seed: int, offset: int | None = None) -> MaskSpec:
    """Copy of ``spec`` with a new draw seed (and optionally comb offset)."""
    if offset is None:
        return replace(spec, seed=seed)
    return replace(spec, seed=seed, offset=offset)


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-d FFT over the last two axes.

    float32 input yields complex64; float64 yields complex128. The transform
    itself runs in double precision so the round-trip error stays far below
    the single-precision quantization floor.
    """
    x = np.asarray(img)
    k = np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x.astype(np.float64, copy=False), axes=(-2, -1)),
                    axes=(-2, -1), norm="ortho"),
        axes=(-2, -1))
    return k.astype(np.complex64) if x.dtype == np.float32 else k


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`; returns a complex image."""
    k = np.asarray(ksp)
    x = np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k.astype(np.complex128, copy=False), axes=(-2, -1)),
                     axes=(-2, -1), norm="ortho"),
        axes=(-2, -1))
    return x.astype(np.complex64) if k.dtype == np.complex64 else x


def degrade(img: np.ndarray, mask: Mask) -> np.ndarray:
    """Zero-filled reconstruction magnitude |F^-1(M . F(x))|.

    ``img`` is a [1, H, W] or [H, W] float array normalized to [0, 1]; the
    output matches the input dims and dtype float32.
    """
    x = np.asarray(img)
    if x.ndim == 3 and x.shape[0] == 1:
        plane = x[0]
    elif x.ndim == 2:
        plane = x
    else:
        raise ValueError(f"expected [1, H, W] or [H, W] image, got dims {x.shape}")
    if plane.shape != mask.kept.shape:
        raise ValueError(f"image dims {plane.shape} do not match mask dims {mask.kept.shape}")
    if not np.isfinite(plane).all():
        raise ValueError("image contains non-finite values")
    if plane.min() < -1e-6 or plane.max() > 1.0 + 1e-6:
        raise ValueError("image must be normalized to [0, 1]")
    out = np.abs(ifft2c(fft2c(plane) * mask.kept)).astype(np.float32)
    return out.reshape(x.shape)
