"""Target-aware homography estimation network.

A strided conv stem produces 1/4 and 1/8 scale structural features; the 1/4
map goes through the HSA block, the 1/8 map through plain windowed
self-attention.  Offsets are then refined coarse to fine: at each scale, n
times, the source features are warped by the current estimate, correlated
against the target features within a +-r window, and a small conv head
regresses a residual for the four corners.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import HSABlock, HsaConfig, WindowAttentionBlock
from .errors import ProjectiveOverflow, ShapeMismatch

OFFSET_CLAMP = 64.0
LOSS_GAMMA = 0.85


@dataclass
class ModelConfig:
    in_channels: int = 3
    widths: tuple = (32, 64, 96)
    window: int = 4
    heads: int = 4
    corr_radius: int = 4
    head_width: int = 64
    use_hsa: bool = True
    patch: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)


TOY_MODEL = ModelConfig(widths=(16, 32, 48), head_width=32)


@dataclass
class PyramidFeatures:
    quarter: torch.Tensor  # B x C2 x H/4 x W/4
    eighth: torch.Tensor  # B x C3 x H/8 x W/8


@dataclass
class EstimateTrace:
    offsets: list = field(default_factory=list)  # running B x 4 x 2 estimate after each iteration
    features: PyramidFeatures | None = None  # source-image pyramid

    @property
    def final_offsets(self) -> torch.Tensor:
        return self.offsets[-1]


def patch_corners(size: float, like: torch.Tensor) -> torch.Tensor:
    c = [[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]]
    return torch.tensor(c, dtype=like.dtype, device=like.device)


def dlt_batch(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Batched exact 4-point homography, B x 4 x 2 -> B x 3 x 3 with h33 = 1."""
    b = dst.shape[0]
    src = src.expand(b, 4, 2)
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = torch.ones_like(x), torch.zeros_like(x)
    r1 = torch.stack([x, y, one, zero, zero, zero, -u * x, -u * y], dim=-1)
    r2 = torch.stack([zero, zero, zero, x, y, one, -v * x, -v * y], dim=-1)
    a = torch.stack([r1, r2], dim=2).reshape(b, 8, 8)
    rhs = torch.stack([u, v], dim=2).reshape(b, 8, 1)
    try:
        h8 = torch.linalg.solve(a, rhs).reshape(b, 8)
    except RuntimeError as exc:
        raise ProjectiveOverflow("degenerate corner estimate") from exc
    return torch.cat([h8, torch.ones_like(h8[:, :1])], dim=1).reshape(b, 3, 3)


def offsets_to_h(offsets: torch.Tensor, size: float) -> torch.Tensor:
    c = patch_corners(size, offsets)
    return dlt_batch(c, c + offsets)


def _feature_grid(hf, wf, stride, like):
    ys, xs = torch.meshgrid(
        torch.arange(hf, device=like.device, dtype=like.dtype) + 0.5,
        torch.arange(wf, device=like.device, dtype=like.dtype) + 0.5,
        indexing="ij",
    )
    return torch.stack([xs * stride, ys * stride, torch.ones_like(xs)], dim=0).reshape(3, -1)


def warped_coords(h_full: torch.Tensor, hf: int, wf: int, stride: float) -> torch.Tensor:
    """B x hf x wf x 2 source-feature coordinates (x, y) of H applied to each feature centre."""
    q = h_full @ _feature_grid(hf, wf, stride, h_full)
    w = q[:, 2]
    if torch.any(w.abs() <= 1e-12):
        raise ProjectiveOverflow("feature grid maps to the line at infinity")
    xy = torch.stack([q[:, 0] / w, q[:, 1] / w], dim=-1) / stride
    return xy.reshape(-1, hf, wf, 2)


def _sample(img: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Bilinear sample with continuous pixel-centre coordinates, zero outside."""
    hh, ww = img.shape[-2:]
    grid = torch.stack([2 * xy[..., 0] / ww - 1, 2 * xy[..., 1] / hh - 1], dim=-1)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def warp_features(feat: torch.Tensor, h_full: torch.Tensor, stride: float) -> torch.Tensor:
    """out(p) = feat(H_s p), H_s being ``h_full`` expressed at 1/stride resolution."""
    return _sample(feat, warped_coords(h_full, *feat.shape[-2:], stride))


def local_correlation(target: torch.Tensor, moving: torch.Tensor, radius: int) -> torch.Tensor:
    """(2r+1)^2 channels: <target(p), moving(p + delta)> / sqrt(C), delta row-major (dy, dx)."""
    c, h, w = target.shape[1:]
    padded = F.pad(moving, (radius,) * 4)
    out = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out.append((target * padded[:, :, dy : dy + h, dx : dx + w]).sum(1))
    return torch.stack(out, dim=1) / math.sqrt(c)


def correlation_volume(target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    """All-pairs <target(p), source(q)> / sqrt(C) as a (B*h*w) x 1 x h x w stack of maps over q."""
    b, c, h, w = target.shape
    vol = target.reshape(b, c, h * w).transpose(1, 2) @ source.reshape(b, c, h * w)
    return (vol / math.sqrt(c)).reshape(b * h * w, 1, h, w)


def lookup_correlation(volume: torch.Tensor, coords: torch.Tensor, radius: int) -> torch.Tensor:
    """Sample each target pixel's map at coords + delta; B x (2r+1)^2 x h x w.

    Equivalent to correlating the target features with the source features
    bilinearly sampled at H p + delta.
    """
    b, h, w, _ = coords.shape
    r = torch.arange(-radius, radius + 1, dtype=coords.dtype, device=coords.device)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    delta = torch.stack([dx, dy], dim=-1)  # k x k x 2
    xy = coords.reshape(b * h * w, 1, 1, 2) + delta[None]
    out = _sample(volume, xy)  # (B h w) x 1 x k x k
    return out.reshape(b, h, w, -1).permute(0, 3, 1, 2)


def displacement_field(h_full: torch.Tensor, hf: int, wf: int, stride: float) -> torch.Tensor:
    """Current motion H p - p at each feature location, in feature pixels."""
    pts = _feature_grid(hf, wf, stride, h_full)
    q = h_full @ pts
    disp = q[:, :2] / q[:, 2:3] - pts[:2]
    return (disp / stride).reshape(-1, 2, hf, wf)


class RegressionHead(nn.Module):
    """Convs down to a 2 x 2 map whose 2 channels are the (dx, dy) residual of each corner."""

    def __init__(self, in_channels: int, width: int, size: int):
        super().__init__()
        # maps larger than 16x16 are reduced by the first conv already
        first_stride = 2 if size > 16 else 1
        layers = [nn.Conv2d(in_channels, width, 3, stride=first_stride, padding=1), nn.GELU()]
        size = -(-size // first_stride)
        while size > 2:
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.GELU()]
            size = -(-size // 2)
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, 2, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        y = self.out(self.body(x))  # B x 2 x 2 x 2
        y = y.permute(0, 2, 3, 1)  # B x row x col x (dx, dy)
        return torch.stack([y[:, 0, 0], y[:, 0, 1], y[:, 1, 1], y[:, 1, 0]], dim=1)


def _init_conv(m):
    if isinstance(m, nn.Conv2d):
        bound = 1.0 / math.sqrt(m.in_channels * m.kernel_size[0] * m.kernel_size[1] / m.groups)
        nn.init.uniform_(m.weight, -bound * math.sqrt(3), bound * math.sqrt(3))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def standardize(img: torch.Tensor) -> torch.Tensor:
    """Per-image, per-channel zero mean / unit variance."""
    mean = img.mean(dim=(2, 3), keepdim=True)
    std = img.std(dim=(2, 3), keepdim=True)
    return (img - mean) / (std + 1e-3)


class TAHEM(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.widths
        att = HsaConfig(cfg.window, cfg.heads)
        self.stem1 = nn.Conv2d(cfg.in_channels, c1, 3, stride=2, padding=1)
        self.stem2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.stem3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.large = HSABlock(c2, att) if cfg.use_hsa else WindowAttentionBlock(c2, att)
        self.small = WindowAttentionBlock(c3, att)
        corr = (2 * cfg.corr_radius + 1) ** 2 + 2
        self.head_eighth = RegressionHead(corr, cfg.head_width, cfg.patch // 8)
        self.head_quarter = RegressionHead(corr, cfg.head_width, cfg.patch // 4)
        for name, m in self.named_modules():
            if not name.endswith(".out"):
                _init_conv(m)

    def extract_pyramid(self, img: torch.Tensor) -> PyramidFeatures:
        if img.dim() != 4 or img.shape[1] != self.cfg.in_channels or img.shape[2:] != (self.cfg.patch,) * 2:
            raise ShapeMismatch(
                f"expected B x {self.cfg.in_channels} x {self.cfg.patch} x {self.cfg.patch}, got {tuple(img.shape)}"
            )
        x = F.gelu(self.stem1(standardize(img)))
        x = F.gelu(self.stem2(x))
        quarter = self.large(x)
        eighth = self.small(F.gelu(self.stem3(quarter)))
        return PyramidFeatures(quarter, eighth)

    def refine(self, head, f_src, f_tgt, offsets, stride, n, trace):
        size = float(self.cfg.patch)
        hf, wf = f_src.shape[-2:]
        volume = correlation_volume(f_tgt, f_src)
        for _ in range(n):
            h = offsets_to_h(offsets.detach(), size)
            corr = lookup_correlation(volume, warped_coords(h, hf, wf, stride), self.cfg.corr_radius)
            x = torch.cat([corr, displacement_field(h, hf, wf, stride)], dim=1)
            offsets = (offsets + head(x) * stride).clamp(-OFFSET_CLAMP, OFFSET_CLAMP)
            trace.offsets.append(offsets)
        return offsets

    def forward(self, src: torch.Tensor, tgt: torch.Tensor, n: int = 5) -> EstimateTrace:
        if n < 1:
            raise ValueError(f"iteration count must be >= 1, got {n}")
        if src.shape != tgt.shape:
            raise ShapeMismatch(f"source {tuple(src.shape)} vs target {tuple(tgt.shape)}")
        fs = self.extract_pyramid(src)
        ft = self.extract_pyramid(tgt)
        trace = EstimateTrace(features=fs)
        offsets = torch.zeros(src.shape[0], 4, 2, dtype=src.dtype, device=src.device)
        offsets = self.refine(self.head_eighth, fs.eighth, ft.eighth, offsets, 8.0, n, trace)
        self.refine(self.head_quarter, fs.quarter, ft.quarter, offsets, 4.0, n, trace)
        return trace

    estimate = forward


def loss_h(trace: EstimateTrace, gt: torch.Tensor, gamma: float = LOSS_GAMMA) -> torch.Tensor:
    """Sum over iterations of gamma^(T-t) * mean |offsets_t - gt|."""
    preds = trace.offsets if isinstance(trace, EstimateTrace) else list(trace)
    if not preds:
        raise ValueError("empty trace")
    total = len(preds)
    loss = preds[0].new_zeros(())
    for t, p in enumerate(preds, start=1):
        loss = loss + gamma ** (total - t) * (p - gt).abs().mean()
    return loss


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
