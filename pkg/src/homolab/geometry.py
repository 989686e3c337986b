"""Planar homography math: 4-point parameterization, DLT, point and image warping.

Coordinates are continuous (x, y) with pixel (row i, col j) centred at
(j + 0.5, i + 0.5).  A patch of size (w, h) therefore spans [0, w] x [0, h]
and its corners are (0, 0), (w, 0), (w, h), (0, h) relative to its origin.
Corner order everywhere is TL, TR, BR, BL.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DegenerateCorners, ProjectiveOverflow

W_EPS = 1e-12
H22_EPS = 1e-9
DET_EPS = 1e-12


@dataclass(frozen=True)
class PatchFrame:
    """Axis-aligned patch inside a parent image: origin (x, y) and size (w, h)."""

    origin: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, float] = (128.0, 128.0)

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise ValueError(f"patch size must be positive, got {self.size}")

    def corners(self) -> np.ndarray:
        x0, y0 = self.origin
        w, h = self.size
        return np.array(
            [[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], dtype=np.float64
        )


def normalize(h: np.ndarray) -> np.ndarray:
    """Scale so h[2, 2] == 1; reject matrices that cannot be put in that form."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3) or not np.all(np.isfinite(h)):
        raise DegenerateCorners(f"not a finite 3x3 matrix: shape {h.shape}")
    if abs(h[2, 2]) < H22_EPS:
        raise DegenerateCorners(f"|h[2,2]| = {abs(h[2, 2]):.3g} too small to normalize")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= DET_EPS:
        raise DegenerateCorners("singular homography")
    return h


def _check_not_collinear(pts: np.ndarray) -> None:
    scale = max(float(np.abs(pts).max()), 1.0)
    for a, b, c in combinations(range(4), 3):
        u, v = pts[b] - pts[a], pts[c] - pts[a]
        if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-10 * scale * scale:
            raise DegenerateCorners(f"corners {a},{b},{c} are collinear")


def dlt_4pt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography mapping four src points onto four dst points.

    Solves the 8x8 system with h[2, 2] fixed to 1.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    _check_not_collinear(src)
    _check_not_collinear(dst)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    try:
        h8 = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCorners("rank-deficient DLT system") from exc
    return normalize(np.append(h8, 1.0).reshape(3, 3))


def offsets_to_homography(frame: PatchFrame, d: np.ndarray) -> np.ndarray:
    """Homography taking the frame corners to the corners displaced by ``d`` (4x2)."""
    d = np.asarray(d, dtype=np.float64).reshape(4, 2)
    if not np.all(np.isfinite(d)):
        raise DegenerateCorners("non-finite corner offsets")
    # solve in frame-local coordinates for conditioning, then move to parent coords
    local = PatchFrame((0.0, 0.0), frame.size).corners()
    h = dlt_4pt(local, local + d)
    x0, y0 = frame.origin
    if x0 == 0 and y0 == 0:
        return h
    return normalize(translation(x0, y0) @ h @ translation(-x0, -y0))


def homography_to_offsets(frame: PatchFrame, h: np.ndarray) -> np.ndarray:
    c = frame.corners()
    out = warp_points(normalize(h), c) - c
    if not np.all(np.isfinite(out)):
        raise ProjectiveOverflow("non-finite corner offsets")
    return out


def warp_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``h`` to an (N, 2) array of points with homogeneous division."""
    h = np.asarray(h, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    hom = pts @ h[:, :2].T + h[:, 2]
    w = hom[:, 2]
    if np.any(np.abs(w) <= W_EPS):
        raise ProjectiveOverflow("point maps to the line at infinity")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix for applying ``b`` first, then ``a``."""
    return normalize(np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64))


def invert(h: np.ndarray) -> np.ndarray:
    return normalize(np.linalg.inv(normalize(h)))


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def scaling(s: float) -> np.ndarray:
    return np.diag([s, s, 1.0])


def warp_image(h: np.ndarray, img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Forward-warp ``img`` by ``h`` into an output of shape ``out_size = (rows, cols)``.

    Inverse mapping with bilinear sampling: output pixel p takes the value of
    ``img`` at ``h^-1 p``.  Samples falling outside the source grid are 0 and
    interpolated values are clamped to the input's value range.
    """
    rows, cols = int(out_size[0]), int(out_size[1])
    if rows <= 0 or cols <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    img = np.asarray(img)
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    src = src.astype(np.float64, copy=False)
    ih, iw = src.shape[:2]

    hinv = invert(h)
    jj, ii = np.meshgrid(np.arange(cols) + 0.5, np.arange(rows) + 0.5)
    pts = np.stack([jj.ravel(), ii.ravel()], axis=1)
    hom = pts @ hinv[:, :2].T + hinv[:, 2]
    w = hom[:, 2]
    bad_w = np.abs(w) <= W_EPS
    w = np.where(bad_w, 1.0, w)
    # back to array-index space
    qx = hom[:, 0] / w - 0.5
    qy = hom[:, 1] / w - 0.5

    tol = 1e-9
    valid = (~bad_w) & (qx >= -tol) & (qx <= iw - 1 + tol) & (qy >= -tol) & (qy <= ih - 1 + tol)
    qx = np.clip(qx, 0, iw - 1)
    qy = np.clip(qy, 0, ih - 1)
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    fx = (qx - x0)[:, None]
    fy = (qy - y0)[:, None]
    x1 = np.minimum(x0 + 1, iw - 1)
    y1 = np.minimum(y0 + 1, ih - 1)

    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    val = top * (1 - fy) + bot * fy
    if src.size:
        val = np.clip(val, src.min(), src.max())
    val[~valid] = 0.0
    out = val.reshape(rows, cols, src.shape[2])
    if squeeze:
        out = out[..., 0]
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def warp_validity(h: np.ndarray, in_size: tuple[int, int], out_size: tuple[int, int]) -> np.ndarray:
    """Boolean mask of output pixels whose source sample lies inside the input grid."""
    ones = np.ones(in_size, dtype=np.float64)
    return warp_image(h, ones, out_size) > 0.5


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon_to_rect(poly: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against an axis-aligned rectangle."""
    out = [tuple(p) for p in np.asarray(poly, dtype=np.float64)]
    edges = [
        (lambda p: p[0] >= x0, lambda p, q: _cut_x(p, q, x0)),
        (lambda p: p[0] <= x1, lambda p, q: _cut_x(p, q, x1)),
        (lambda p: p[1] >= y0, lambda p, q: _cut_y(p, q, y0)),
        (lambda p: p[1] <= y1, lambda p, q: _cut_y(p, q, y1)),
    ]
    for inside, cut in edges:
        if not out:
            break
        src, out = out, []
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(cut(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cut(prev, cur))
            prev = cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cut_x(p, q, x):
    t = (x - p[0]) / (q[0] - p[0])
    return (x, p[1] + t * (q[1] - p[1]))


def _cut_y(p, q, y):
    t = (y - p[1]) / (q[1] - p[1])
    return (p[0] + t * (q[0] - p[0]), y)
