"""Procedural scenes: coloured geometric shapes on textured backgrounds.

Used both as the parent-image corpus for pair synthesis and as the labelled
toy detection corpus for the semantic backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

SHAPE_CLASSES = ("circle", "square", "triangle")


@dataclass
class ToyDetectionSample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # x0, y0, x1, y1
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # 1-based


def textured_background(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, 3)
    img = np.broadcast_to(base, (rows, cols, 3)).copy()
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.02, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12) * rng.choice([-1, 1], 3)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * amp
    noise = rng.normal(0, 1, (rows // 4 + 1, cols // 4 + 1, 3))
    noise = cv2.resize(noise, (cols, rows), interpolation=cv2.INTER_CUBIC)
    img += 0.06 * noise
    return np.clip(img, 0, 1)


def _draw_shape(img, rng, kind, cx, cy, r, color):
    if kind == "circle":
        cv2.circle(img, (int(cx), int(cy)), int(r), color, -1, lineType=cv2.LINE_AA)
        return cx - r, cy - r, cx + r, cy + r
    if kind == "square":
        cv2.rectangle(img, (int(cx - r), int(cy - r)), (int(cx + r), int(cy + r)), color, -1)
        return cx - r, cy - r, cx + r, cy + r
    pts = np.array([[cx, cy - r], [cx + r, cy + r], [cx - r, cy + r]], dtype=np.int32)
    cv2.fillPoly(img, [pts], color, lineType=cv2.LINE_AA)
    return cx - r, cy - r, cx + r, cy + r


def render_scene(
    rng: np.random.Generator,
    rows: int = 128,
    cols: int = 128,
    n_shapes: tuple[int, int] = (1, 3),
    radius: tuple[float, float] = (10.0, 26.0),
) -> ToyDetectionSample:
    """Draw 1..k non-overlapping shapes; boxes are returned in pixel-edge coordinates."""
    img = textured_background(rng, rows, cols)
    boxes, labels = [], []
    want = int(rng.integers(n_shapes[0], n_shapes[1] + 1))
    for _ in range(50 * want):
        if len(boxes) == want:
            break
        r = float(rng.uniform(*radius))
        cx = float(rng.uniform(r + 1, cols - r - 1))
        cy = float(rng.uniform(r + 1, rows - r - 1))
        box = (cx - r, cy - r, cx + r, cy + r)
        if any(_overlap(box, b) for b in boxes):
            continue
        k = int(rng.integers(len(SHAPE_CLASSES)))
        color = tuple(float(c) for c in rng.uniform(0, 1, 3))
        # ensure contrast against the local background
        local = img[int(cy), int(cx)]
        if np.abs(np.asarray(color) - local).max() < 0.35:
            color = tuple(float(c) for c in np.where(local > 0.5, 0.05, 0.95))
        x0, y0, x1, y1 = _draw_shape(img, rng, SHAPE_CLASSES[k], cx, cy, r, color)
        boxes.append((max(x0, 0.0), max(y0, 0.0), min(x1 + 1, cols), min(y1 + 1, rows)))
        labels.append(k + 1)
    return ToyDetectionSample(
        np.clip(img, 0, 1),
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(labels, dtype=np.int64),
    )


def _overlap(a, b, pad=2.0):
    return not (a[2] + pad < b[0] or b[2] + pad < a[0] or a[3] + pad < b[1] or b[3] + pad < a[1])


def detection_corpus(n: int, seed: int, size: int = 128) -> list[ToyDetectionSample]:
    return [render_scene(np.random.default_rng([seed, i]), size, size) for i in range(n)]


def parent_image(seed: int, index: int, rows: int = 240, cols: int = 320) -> np.ndarray:
    """Large textured scene with many shapes, used as a parent image for pair sampling."""
    rng = np.random.default_rng([seed, index, 7])
    return render_scene(rng, rows, cols, n_shapes=(6, 12), radius=(8.0, 30.0)).image
