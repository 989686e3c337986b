"""Evaluation metrics: corner error (ACE/MACE), PME, PSNR, SSIM, NCC and the ACE CDF."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import EmptySet, ImageTooSmall, ShapeMismatch, ZeroVariance
from .geometry import warp_points

PSNR_CAP = 100.0


def ace(pred, gt, rmse: bool = False) -> float:
    """Average corner error: mean Euclidean distance over the 4 corners.

    With ``rmse=True`` returns the root of the mean squared corner distance.
    """
    diff = np.asarray(pred, dtype=np.float64).reshape(4, 2) - np.asarray(gt, dtype=np.float64).reshape(4, 2)
    dist2 = np.sum(diff * diff, axis=1)
    if rmse:
        return float(np.sqrt(dist2.mean()))
    return float(np.sqrt(dist2).mean())


def mace(preds, gts, rmse: bool = False) -> tuple[float, list[float]]:
    preds = list(preds)
    gts = list(gts)
    if not preds:
        raise EmptySet("mace needs at least one sample")
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    per = [ace(p, g, rmse) for p, g in zip(preds, gts)]
    return float(np.mean(per)), per


def pme(h_pred, point_pairs) -> float:
    """Mean distance between warped source points and their target points."""
    pairs = np.asarray(point_pairs, dtype=np.float64)
    if pairs.size == 0:
        raise EmptySet("pme needs at least one point pair")
    pairs = pairs.reshape(-1, 2, 2)
    moved = warp_points(h_pred, pairs[:, 0])
    return float(np.linalg.norm(moved - pairs[:, 1], axis=1).mean())


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def default_peak(img) -> float:
    return 255.0 if np.issubdtype(np.asarray(img).dtype, np.integer) else 1.0


def psnr(a, b, peak: float | None = None) -> float:
    """PSNR in dB; identical inputs return the 100 dB cap (see ``is_capped``)."""
    if peak is None:
        peak = default_peak(a)
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def is_capped(value: float) -> bool:
    return value >= PSNR_CAP


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a, b, data_range: float | None = None, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.shape[0] < win or a.shape[1] < win:
        raise ImageTooSmall(f"image {a.shape[:2]} smaller than the {win}x{win} window")
    if data_range is None:
        data_range = 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(win, sigma)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def ncc(a, b) -> float:
    """Zero-mean normalized cross-correlation over all pixels."""
    a, b = _same_shape(a, b)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = float(np.sum(a * a)), float(np.sum(b * b))
    if na == 0 and nb == 0:
        raise ZeroVariance("both images are constant")
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.sum(a * b) / math.sqrt(na * nb), -1.0, 1.0))


def ace_cdf(per_sample_ace, thresholds) -> list[tuple[float, float]]:
    vals = np.sort(np.asarray(per_sample_ace, dtype=np.float64))
    if vals.size == 0:
        raise EmptySet("ace_cdf needs at least one sample")
    th = np.asarray(thresholds, dtype=np.float64)
    frac = np.searchsorted(vals, th, side="right") / vals.size
    return [(float(t), float(f)) for t, f in zip(th, frac)]


@dataclass
class MetricsReport:
    mace: float
    psnr: float
    ssim: float
    ncc: float
    pme: float | None = None
    per_sample_ace: list = field(default_factory=list)
    psnr_capped: int = 0
    n: int = 0
    by_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_kind"] = {k: (v.to_dict() if isinstance(v, MetricsReport) else v) for k, v in self.by_kind.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def headline(self) -> dict:
        return {"mace": self.mace, "pme": self.pme, "psnr": self.psnr, "ssim": self.ssim, "ncc": self.ncc}


def write_cdf_csv(path, cdf) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction"])
        for t, f in cdf:
            w.writerow([f"{t:.6g}", f"{f:.6f}"])


def identity_baseline_ace(rho: float = 25.6) -> float:
    """Closed-form E||(U, V)|| for U, V ~ Uniform[-rho, rho]."""
    return rho * (math.sqrt(2) + math.log(1 + math.sqrt(2))) / 3
