"""Windowed multi-head attention and the hierarchical scale-aware (HSA) block.

Tensors are channels-first, ``B x C x H x W``.  Windowed token tensors are
``B x nW x T x C`` with windows enumerated row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


@dataclass(frozen=True)
class HsaConfig:
    window: int = 4
    heads: int = 4

    def head_dim(self, channels: int) -> int:
        if self.window < 1:
            raise ShapeMismatch(f"window must be >= 1, got {self.window}")
        if channels % self.heads:
            raise ShapeMismatch(f"{channels} channels not divisible into {self.heads} heads")
        return channels // self.heads


def pad_to_multiple(x: torch.Tensor, s: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


def window_partition(x: torch.Tensor, s: int) -> torch.Tensor:
    b, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeMismatch(f"{h}x{w} not divisible by window {s}")
    x = x.reshape(b, c, h // s, s, w // s, s)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // s) * (w // s), s * s, c)


def window_merge(t: torch.Tensor, s: int, h: int, w: int) -> torch.Tensor:
    b, _, _, c = t.shape
    t = t.reshape(b, h // s, w // s, s, s, c)
    return t.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


def _covering(n_full: int, n_down: int, s: int, i: int) -> range:
    lo = (i * s) // 2
    hi = min(-(-((i + 1) * s) // 2), n_down)
    return range(lo, hi)


def cross_scale_index(h: int, w: int, s: int, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Token indices into the flattened downsampled map for each full-res window.

    Window (i, j) of an ``h x w`` map covers the half-resolution region that
    lies under it; that region (at most ``s*s`` tokens) is padded to ``s*s``
    and the padding is flagged False in the returned mask.
    """
    hd, wd = -(-h // 2), -(-w // 2)
    idx, mask = [], []
    for i in range(h // s):
        for j in range(w // s):
            toks = [r * wd + c for r in _covering(h, hd, s, i) for c in _covering(w, wd, s, j)]
            n = len(toks)
            idx.append(toks + [0] * (s * s - n))
            mask.append([True] * n + [False] * (s * s - n))
    return (
        torch.tensor(idx, dtype=torch.long, device=device),
        torch.tensor(mask, dtype=torch.bool, device=device),
    )


def gather_windows(x_down: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Gather ``B x nW x T x C`` tokens from a ``B x C x h x w`` map."""
    b, c = x_down.shape[:2]
    flat = x_down.reshape(b, c, -1).transpose(1, 2)  # B x hw x C
    nw, t = index.shape
    out = flat[:, index.reshape(-1)]
    return out.reshape(b, nw, t, c)


def windowed_attention(q, k, v, heads: int, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v per window and head; ``mask`` (nW x Tk) marks valid keys."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:2] != k.shape[:2]:
        raise ShapeMismatch(f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    b, nw, tq, c = q.shape
    tk = k.shape[2]
    if c % heads:
        raise ShapeMismatch(f"{c} channels not divisible into {heads} heads")
    d = c // heads

    def split(x, t):
        return x.reshape(b, nw, t, heads, d).transpose(2, 3)  # B nW h T d

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        if mask.shape != (nw, tk):
            raise ShapeMismatch(f"mask {tuple(mask.shape)} vs ({nw}, {tk})")
        logits = logits.masked_fill(~mask[None, :, None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ vh).transpose(2, 3).reshape(b, nw, tq, c)
    return (out, weights) if return_weights else out


class QKVProjection(nn.Module):
    """1x1 projections: q, k, v from the full map and (optionally) k, v from the half map."""

    def __init__(self, channels: int, cross_scale: bool = True):
        super().__init__()
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.cross_scale = cross_scale
        if cross_scale:
            self.k_small = nn.Conv2d(channels, channels, 1)
            self.v_small = nn.Conv2d(channels, channels, 1)


def project_qkv(f, f_down, proj: QKVProjection):
    """Return (Q, K_L, V_L, K_S, V_S); Q is shared by both scales."""
    if f.shape[1] != f_down.shape[1]:
        raise ShapeMismatch(f"channel mismatch {f.shape[1]} vs {f_down.shape[1]}")
    want = (-(-f.shape[2] // 2), -(-f.shape[3] // 2))
    if tuple(f_down.shape[2:]) != want:
        raise ShapeMismatch(f"downsampled map {tuple(f_down.shape[2:])}, expected {want}")
    return proj.q(f), proj.k(f), proj.v(f), proj.k_small(f_down), proj.v_small(f_down)


def downsample(f: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(f, 2, ceil_mode=True)


class WindowAttentionBlock(nn.Module):
    """Plain windowed self-attention followed by the conv merge and a residual."""

    def __init__(self, channels: int, cfg: HsaConfig = HsaConfig()):
        super().__init__()
        cfg.head_dim(channels)
        self.cfg = cfg
        self.proj = QKVProjection(channels, cross_scale=False)
        self.merge = nn.Conv2d(channels, channels, 3, padding=1)

    def attend(self, f):
        s = self.cfg.window
        h, w = f.shape[-2:]
        q, k, v = (window_partition(p(f), s) for p in (self.proj.q, self.proj.k, self.proj.v))
        return window_merge(windowed_attention(q, k, v, self.cfg.heads), s, h, w)

    def forward(self, f):
        h, w = f.shape[-2:]
        x = pad_to_multiple(f, self.cfg.window)
        y = x + F.gelu(self.merge(self.attend(x)))
        return y[..., :h, :w]


class HSABlock(WindowAttentionBlock):
    """Shared-query attention over full-res and 2x-downsampled keys/values; both results are summed, merged by a conv and added back to the input."""

    def __init__(self, channels: int, cfg: HsaConfig = HsaConfig()):
        nn.Module.__init__(self)
        cfg.head_dim(channels)
        self.cfg = cfg
        self.proj = QKVProjection(channels, cross_scale=True)
        self.merge = nn.Conv2d(channels, channels, 3, padding=1)
        self._index_cache: dict = {}

    def _index(self, h, w, device):
        key = (h, w, str(device))
        if key not in self._index_cache:
            self._index_cache[key] = cross_scale_index(h, w, self.cfg.window, device)
        return self._index_cache[key]

    def attend(self, f):
        s, heads = self.cfg.window, self.cfg.heads
        h, w = f.shape[-2:]
        q, kl, vl, ks, vs = project_qkv(f, downsample(f), self.proj)
        qw = window_partition(q, s)
        f_large = windowed_attention(qw, window_partition(kl, s), window_partition(vl, s), heads)
        index, mask = self._index(h, w, f.device)
        f_small = windowed_attention(qw, gather_windows(ks, index), gather_windows(vs, index), heads, mask)
        return window_merge(f_large + f_small, s, h, w)


def hsa_block(f: torch.Tensor, block: HSABlock) -> torch.Tensor:
    return block(f)
