"""Parametric harsh-environment degradations: low light, haze, rain.

Each kind has a *sampling* range (used when drawing random parameters) and a
wider *valid* range (checked on explicit specs).  Images are float arrays in
[0, 1], H x W or H x W x C.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import BadParams

KINDS = ("normal", "low_light", "haze", "rain")

SAMPLE_RANGES = {
    "normal": {},
    "low_light": {"gamma": (1.8, 3.2), "sigma": (0.005, 0.03)},
    "haze": {"t": (0.3, 0.8), "airlight": (0.7, 1.0)},
    "rain": {"count": (50, 200), "angle": (60.0, 120.0), "intensity": (0.2, 0.6)},
}

VALID_RANGES = {
    "normal": {},
    "low_light": {"gamma": (1.0, 5.0), "sigma": (0.0, 0.2)},
    "haze": {"t": (0.0, 1.0), "airlight": (0.0, 1.0)},
    "rain": {"count": (0, 2000), "angle": (0.0, 180.0), "intensity": (0.0, 1.0)},
}

STREAK_LENGTH = (6, 16)
RAIN_BLUR_SIGMA = 0.6


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "normal"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadParams(f"unknown degradation kind {self.kind!r}")
        valid = VALID_RANGES[self.kind]
        if set(self.params) != set(valid):
            raise BadParams(f"{self.kind} expects params {sorted(valid)}, got {sorted(self.params)}")
        for name, (lo, hi) in valid.items():
            v = self.params[name]
            if not np.isfinite(v) or not lo <= v <= hi:
                raise BadParams(f"{self.kind}.{name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: self.params[k] for k in sorted(self.params)}}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["kind"], dict(d.get("params", {})))


def sample_spec(kind: str, rng: np.random.Generator) -> DegradationSpec:
    if kind not in KINDS:
        raise BadParams(f"unknown degradation kind {kind!r}")
    params = {}
    for name, (lo, hi) in SAMPLE_RANGES[kind].items():
        if name == "count":
            params[name] = int(rng.integers(lo, hi + 1))
        else:
            params[name] = float(rng.uniform(lo, hi))
    return DegradationSpec(kind, params)


def apply_degradation(img: np.ndarray, spec: DegradationSpec, rng_seed: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise BadParams("image values must lie in [0, 1]")
    p = spec.params
    if spec.kind == "normal":
        return img.copy()
    rng = np.random.default_rng(rng_seed)
    if spec.kind == "low_light":
        out = img ** p["gamma"] + rng.normal(0.0, p["sigma"], img.shape)
    elif spec.kind == "haze":
        out = img * p["t"] + p["airlight"] * (1.0 - p["t"])
    else:
        out = _rain(img, p, rng)
    return np.clip(out, 0.0, 1.0)


def _rain(img, p, rng):
    rows, cols = img.shape[:2]
    layer = np.zeros((rows, cols), dtype=np.float64)
    theta = np.deg2rad(p["angle"])
    for _ in range(p["count"]):
        x, y = rng.uniform(0, cols), rng.uniform(0, rows)
        length = rng.uniform(*STREAK_LENGTH)
        dx, dy = length * np.cos(theta), length * np.sin(theta)
        cv2.line(
            layer,
            (int(round(x)), int(round(y))),
            (int(round(x + dx)), int(round(y + dy))),
            1.0,
            1,
            lineType=cv2.LINE_AA,
        )
    layer = cv2.GaussianBlur(layer, (0, 0), RAIN_BLUR_SIGMA)
    base = cv2.GaussianBlur(img, (0, 0), RAIN_BLUR_SIGMA)
    if img.ndim == 3:
        layer = layer[..., None]
    return base + p["intensity"] * layer
