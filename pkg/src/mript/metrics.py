"""Reconstruction quality metrics and report emitters.

PSNR follows the peak-against-clean convention: the peak is the clean
image's maximum, and a zero-error pair reports infinity. SSIM uses the
standard two-moment form with stabilizers C1 = (k1 L)^2 and C2 = (k2 L)^2;
the windowed mode averages a 7 x 7 uniform window over valid positions and
the global mode evaluates the same expression on whole-image moments. All
moment accumulation is float64 with population (1/n) normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    luminance_range: float = 1.0
    window: int = 7
    mode: str = "windowed"

    def __post_init__(self):
        if self.mode not in ("windowed", "global"):
            raise ValueError(f"mode must be windowed or global, got {self.mode!r}")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.k1 <= 0 or self.k2 <= 0 or self.luminance_range <= 0:
            raise ValueError("k1, k2, and luminance_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.luminance_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.luminance_range) ** 2


def _as_plane(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected [1, H, W] or [H, W], got dims {np.asarray(img).shape}")
    return a


def psnr(x, x_clean) -> float:
    """10 log10(peak^2 / MSE) in dB with peak = max of the clean image."""
    a = _as_plane(x)
    b = _as_plane(x_clean)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    peak = float(b.max())
    if peak <= 0.0:
        raise ValueError("clean image has no positive peak")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _box_mean(a: np.ndarray, w: int) -> np.ndarray:
    # mean of every valid w x w window via an integral image
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    s = ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]
    return s / (w * w)


def ssim(x, y, params: SsimParams | None = None) -> float:
    p = params or SsimParams()
    a = _as_plane(x)
    b = _as_plane(y)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")

    if p.mode == "global":
        mx, my = a.mean(), b.mean()
        vx = (a * a).mean() - mx * mx
        vy = (b * b).mean() - my * my
        cov = (a * b).mean() - mx * my
    else:
        if a.shape[0] < p.window or a.shape[1] < p.window:
            raise ValueError(f"image {a.shape} smaller than the {p.window}-px window")
        mx = _box_mean(a, p.window)
        my = _box_mean(b, p.window)
        vx = _box_mean(a * a, p.window) - mx * mx
        vy = _box_mean(b * b, p.window) - my * my
        cov = _box_mean(a * b, p.window) - mx * my

    num = (2.0 * mx * my + p.c1) * (2.0 * cov + p.c2)
    den = (mx * mx + my * my + p.c1) * (vx + vy + p.c2)
    return float(np.mean(num / den))


def error_map(x, y, gain: float = 3.0) -> np.ndarray:
    """Absolute difference amplified by ``gain`` and clamped to [0, 1]."""
    a = np.asarray(x, dtype=np.float32)
    b = np.asarray(y, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")
    return np.clip(gain * np.abs(a - b), 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class PerImageResult:
    dataset: str
    family: str
    acceleration: float
    model: str
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    family: str
    acceleration: float
    model: str
    psnr_db: float
    ssim: float
    n: int
    n_inf: int = 0


@dataclass
class MetricReport:
    rows: list[ReportRow] = field(default_factory=list)


def aggregate_report(results: list[PerImageResult]) -> MetricReport:
    """Group by (dataset, family, acceleration, model) and average.

    Means use exact (fsum) accumulation so they are independent of result
    order. Infinite PSNR values are excluded from the PSNR mean and counted;
    a group that is all-infinite reports an infinite mean.
    """
    if not results:
        raise ValueError("no per-image results to aggregate")
    groups: dict[tuple, list[PerImageResult]] = {}
    for r in results:
        groups.setdefault((r.dataset, r.family, r.acceleration, r.model), []).append(r)
    rows = []
    for key in sorted(groups):
        items = groups[key]
        finite = [r.psnr_db for r in items if math.isfinite(r.psnr_db)]
        n_inf = len(items) - len(finite)
        mean_psnr = math.fsum(finite) / len(finite) if finite else math.inf
        mean_ssim = math.fsum(r.ssim for r in items) / len(items)
        rows.append(ReportRow(*key, psnr_db=mean_psnr, ssim=mean_ssim,
                              n=len(items), n_inf=n_inf))
    return MetricReport(rows)


def _fmt_acc(acc: float) -> str:
    return f"{acc:g}x"


def emit_csv(report: MetricReport) -> str:
    lines = ["dataset,family,acc,model,psnr_db,ssim,n"]
    for r in report.rows:
        psnr_s = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.4f}"
        lines.append(f"{r.dataset},{r.family},{_fmt_acc(r.acceleration)},{r.model},"
                     f"{psnr_s},{r.ssim:.6f},{r.n}")
    return "\n".join(lines) + "\n"


def emit_markdown(report: MetricReport) -> str:
    """Results pivot: one row per model, a PSNR and an SSIM column per
    (dataset, family, acceleration) setting, PSNR to 2 decimals and SSIM
    to 4."""
    settings = sorted({(r.dataset, r.family, r.acceleration) for r in report.rows})
    models = sorted({r.model for r in report.rows})
    cell: dict[tuple, ReportRow] = {
        (r.dataset, r.family, r.acceleration, r.model): r for r in report.rows}

    header = ["Model"]
    for ds, fam, acc in settings:
        tag = f"{ds} {fam} {_fmt_acc(acc)}"
        header += [f"{tag} PSNR [dB]", f"{tag} SSIM"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join([" --- "] * len(header)) + "|"]
    for m in models:
        row = [m]
        for ds, fam, acc in settings:
            r = cell.get((ds, fam, acc, m))
            if r is None:
                row += ["-", "-"]
            else:
                row += ["inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.2f}",
                        f"{r.ssim:.4f}"]
        lines.append("| " + " | ".join(row) + " |")
    notes = [f"Excluded {r.n_inf} infinite PSNR value(s) from the mean for "
             f"{r.dataset} {r.family} {_fmt_acc(r.acceleration)} {r.model}."
             for r in report.rows if r.n_inf]
    text = "\n".join(lines) + "\n"
    if notes:
        text += "\n" + "\n".join(notes) + "\n"
    return text
