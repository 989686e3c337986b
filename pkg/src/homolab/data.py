"""Synthetic degraded image pairs, the on-disk dataset format and the meta split.

Dataset layout::

    <out_dir>/images/<id>_src.png   source patch (degraded)
    <out_dir>/images/<id>_tgt.png   target patch (degraded)
    <out_dir>/images/<id>_gt.png    clean overlap image, source-frame aligned
    <out_dir>/manifest.jsonl        one JSON record per sample, sorted keys
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from . import geometry as geo
from .degrade import KINDS, DegradationSpec, apply_degradation, sample_spec
from .errors import BadRatios, EmptyCorpus, ImageTooSmall, OverlapUnsatisfiable

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class SynthConfig:
    patch: int = 128
    rho: float = 25.6
    min_overlap: float = 0.5
    max_attempts: int = 100
    kinds: tuple = KINDS
    proportions: tuple = (0.25, 0.25, 0.25, 0.25)
    samples_per_image: int = 1
    seed: int = 0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.kinds) != len(self.proportions):
            raise BadRatios("kinds and proportions differ in length")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1) > 1e-9:
            raise BadRatios(f"proportions must be non-negative and sum to 1: {self.proportions}")
        for k in self.kinds:
            if k not in KINDS:
                raise BadRatios(f"unknown degradation kind {k!r}")

    @property
    def margin(self) -> int:
        return int(math.ceil(self.rho))


@dataclass
class PairSample:
    source_patch: np.ndarray
    target_patch: np.ndarray
    overlap_gt: np.ndarray
    offsets_gt: np.ndarray
    h_gt: np.ndarray
    frame: geo.PatchFrame
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    degradation_target: DegradationSpec = field(default_factory=DegradationSpec)
    id: str = ""
    overlap: float = 1.0


@dataclass
class MetaSplit:
    support: list
    query_train: list
    query_test: list

    def to_dict(self):
        return {"support": self.support, "query_train": self.query_train, "query_test": self.query_test}


def overlap_polygon(frame: geo.PatchFrame, d: np.ndarray) -> np.ndarray:
    """Intersection of the source frame with the perturbed quadrilateral (parent coords)."""
    (x0, y0), (w, h) = frame.origin, frame.size
    return geo.clip_polygon_to_rect(frame.corners() + d, x0, y0, x0 + w, y0 + h)


def polygon_mask(poly: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Pixel centres inside a convex polygon given in local coordinates."""
    if len(poly) < 3:
        return np.zeros((rows, cols), dtype=bool)
    yy, xx = np.mgrid[0:rows, 0:cols] + 0.5
    orient = np.sign(_signed_area(poly)) or 1.0
    inside = np.ones((rows, cols), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        inside &= orient * cross >= -1e-9
    return inside


def _signed_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def sample_pair(image: np.ndarray, rng_seed: int, cfg: SynthConfig, kind: str = "normal", id: str = "") -> PairSample:
    """Crop a source patch, perturb its corners and render the matching target patch."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    rows, cols = image.shape[:2]
    need = cfg.patch + 2 * cfg.margin
    if rows < need or cols < need:
        raise ImageTooSmall(f"image {rows}x{cols} smaller than {need}x{need}")

    rng = np.random.default_rng(rng_seed)
    x0 = int(rng.integers(cfg.margin, cols - cfg.patch - cfg.margin + 1))
    y0 = int(rng.integers(cfg.margin, rows - cfg.patch - cfg.margin + 1))
    frame = geo.PatchFrame((float(x0), float(y0)), (float(cfg.patch), float(cfg.patch)))
    area = float(cfg.patch * cfg.patch)
    for _ in range(cfg.max_attempts):
        d = rng.uniform(-cfg.rho, cfg.rho, (4, 2)) if cfg.rho > 0 else np.zeros((4, 2))
        poly = overlap_polygon(frame, d)
        ratio = geo.polygon_area(poly) / area
        if ratio >= cfg.min_overlap:
            break
    else:
        raise OverlapUnsatisfiable(cfg.max_attempts)

    h_gt = geo.offsets_to_homography(frame, d)
    shift = geo.translation(x0, y0)
    # target(p) = parent(h_gt (p + origin))
    to_target = geo.invert(h_gt @ shift)
    src = image[y0 : y0 + cfg.patch, x0 : x0 + cfg.patch].copy()
    tgt = geo.warp_image(to_target, image, (cfg.patch, cfg.patch))
    mask = polygon_mask(poly - np.array([x0, y0]), cfg.patch, cfg.patch)
    gt = src * mask[..., None]

    spec_s = sample_spec(kind, rng)
    spec_t = sample_spec(kind, rng)
    seed_s, seed_t = (int(s) for s in rng.integers(0, 2**31 - 1, 2))
    src_d = apply_degradation(src, spec_s, seed_s)
    tgt_d = apply_degradation(np.clip(tgt, 0, 1), spec_t, seed_t)
    return PairSample(src_d, tgt_d, gt, d, h_gt, frame, spec_s, spec_t, id, ratio)


def largest_remainder(total: int, proportions) -> list[int]:
    quotas = [total * p for p in proportions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def list_images(src_dir) -> list[Path]:
    src_dir = Path(src_dir)
    if not src_dir.is_dir():
        raise FileNotFoundError(f"source directory not found: {src_dir}")
    files = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise EmptyCorpus(f"no images in {src_dir}")
    return files


def read_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise OSError(f"cannot decode image: {path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 3:
        u8 = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), u8):
        raise OSError(f"cannot write image: {path}")


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def assign_kinds(total: int, cfg: SynthConfig) -> list[str]:
    counts = largest_remainder(total, cfg.proportions)
    kinds = [k for k, c in zip(cfg.kinds, counts) for _ in range(c)]
    order = np.random.default_rng([cfg.seed, 1]).permutation(total)
    return [kinds[i] for i in order]


def sample_record(s: PairSample, source_image: str) -> dict:
    return {
        "id": s.id,
        "source_image": source_image,
        "frame": [*s.frame.origin, *s.frame.size],
        "offsets": [float(v) for v in s.offsets_gt.ravel()],
        "h_gt": [float(v) for v in s.h_gt.ravel()],
        "overlap": float(s.overlap),
        "degradation": s.degradation.to_dict(),
        "degradation_target": s.degradation_target.to_dict(),
        "files": {k: f"images/{s.id}_{k}.png" for k in ("src", "tgt", "gt")},
    }


def build_dataset(src_dir, out_dir, cfg: SynthConfig) -> list[dict]:
    """Render every sample, write images and manifest.jsonl, return the records."""
    files = list_images(src_dir)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    total = len(files) * cfg.samples_per_image
    kinds = assign_kinds(total, cfg)
    records = []
    cache = {}
    for idx in range(total):
        path = files[idx // cfg.samples_per_image]
        if path not in cache:
            cache.clear()
            cache[path] = read_image(path)
        sid = f"{idx:06d}"
        s = sample_pair(cache[path], sample_seed(cfg.seed, idx), cfg, kinds[idx], sid)
        write_image(out_dir / "images" / f"{sid}_src.png", s.source_patch)
        write_image(out_dir / "images" / f"{sid}_tgt.png", s.target_patch)
        write_image(out_dir / "images" / f"{sid}_gt.png", s.overlap_gt)
        records.append(sample_record(s, path.name))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def kind_counts(records) -> dict:
    out = {}
    for r in records:
        k = r["degradation"]["kind"]
        out[k] = out.get(k, 0) + 1
    return dict(sorted(out.items()))


def _controlled_rounding(quotas: np.ndarray, col_totals: list[int]) -> np.ndarray:
    """Integer matrix with entries floor/ceil of ``quotas`` and the given row/column sums."""
    base = np.floor(quotas + 1e-12).astype(int)
    frac = quotas - base
    row_need = np.rint(quotas.sum(axis=1)).astype(int) - base.sum(axis=1)
    col_need = np.asarray(col_totals) - base.sum(axis=0)
    out = base.copy()
    for k in sorted(range(len(row_need)), key=lambda r: (-row_need[r], r)):
        cols = sorted(
            (c for c in range(quotas.shape[1]) if frac[k, c] > 1e-12 and col_need[c] > 0),
            key=lambda c: (-col_need[c], -frac[k, c], c),
        )
        for c in cols[: row_need[k]]:
            out[k, c] += 1
            col_need[c] -= 1
    if (out.sum(axis=1) == np.rint(quotas.sum(axis=1))).all() and (out.sum(axis=0) == col_totals).all():
        return out
    # greedy dead-ended; a transport max-flow over the fractional cells always completes
    return base + _round_up_by_flow(frac, np.rint(quotas.sum(axis=1)).astype(int) - base.sum(axis=1),
                                    np.asarray(col_totals) - base.sum(axis=0))


def _round_up_by_flow(frac: np.ndarray, row_need: np.ndarray, col_need: np.ndarray) -> np.ndarray:
    rows, cols = frac.shape
    n = rows + cols + 2
    cap = np.zeros((n, n), dtype=np.int32)
    cap[0, 1 : rows + 1] = row_need
    cap[1 : rows + 1, rows + 1 : rows + cols + 1] = frac > 1e-12
    cap[rows + 1 : rows + cols + 1, -1] = col_need
    flow = maximum_flow(csr_matrix(cap), 0, n - 1)
    if flow.flow_value != row_need.sum():
        raise BadRatios("no consistent integer split for these ratios")
    return flow.flow.toarray()[1 : rows + 1, rows + 1 : rows + cols + 1].clip(min=0)


def split_meta(records, ratios, seed: int) -> MetaSplit:
    """Stratified, deterministic support / query-train / query-test split."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise BadRatios(f"ratios must be 3 non-negative reals summing to 1: {ratios}")
    by_kind: dict[str, list[str]] = {}
    for r in records:
        by_kind.setdefault(r["degradation"]["kind"], []).append(r["id"])
    kinds = sorted(by_kind)
    sizes = np.array([len(by_kind[k]) for k in kinds], dtype=float)
    quotas = sizes[:, None] * np.asarray(ratios)[None, :]
    table = _controlled_rounding(quotas, largest_remainder(len(records), ratios))
    parts = ([], [], [])
    for ki, k in enumerate(kinds):
        ids = sorted(by_kind[k])
        perm = np.random.default_rng([seed, ki]).permutation(len(ids))
        ids = [ids[i] for i in perm]
        start = 0
        for s in range(3):
            parts[s].extend(ids[start : start + table[ki, s]])
            start += table[ki, s]
    return MetaSplit(*(sorted(p) for p in parts))
