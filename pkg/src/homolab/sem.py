"""Semantic extraction: a small SSD-style detector pretrained on toy shapes, then frozen.

The backbone has four stride-2 conv stages (1/2 .. 1/16).  Stages 2 and 3
(strides 4 and 8) are the semantic taps; multibox heads sit on stages 3 and 4
with two square default boxes per location.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms

from .errors import EmptyCorpus, NonFiniteLoss, ShapeMismatch
from .scenes import SHAPE_CLASSES, ToyDetectionSample

VARIANCES = (0.1, 0.2)
NEG_POS_RATIO = 3


@dataclass
class SemConfig:
    widths: tuple = (16, 32, 48, 64)
    box_sizes: tuple = ((24.0, 36.0), (48.0, 64.0))  # per head scale, in pixels
    num_classes: int = len(SHAPE_CLASSES)
    image_size: int = 128
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.box_sizes = tuple(tuple(float(b) for b in bs) for bs in self.box_sizes)


@dataclass
class SemanticFeatures:
    quarter: torch.Tensor
    eighth: torch.Tensor


def _stage(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU()
    )


class SEM(nn.Module):
    def __init__(self, cfg: SemConfig = SemConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stages = nn.ModuleList([_stage(3, w[0]), _stage(w[0], w[1]), _stage(w[1], w[2]), _stage(w[2], w[3])])
        n_def = [len(b) for b in cfg.box_sizes]
        self.loc = nn.ModuleList([nn.Conv2d(w[2], n_def[0] * 4, 3, padding=1), nn.Conv2d(w[3], n_def[1] * 4, 3, padding=1)])
        self.cls = nn.ModuleList(
            [nn.Conv2d(w[2], n_def[0] * (cfg.num_classes + 1), 3, padding=1),
             nn.Conv2d(w[3], n_def[1] * (cfg.num_classes + 1), 3, padding=1)]
        )
        self.register_buffer("priors", default_boxes(cfg), persistent=False)

    @property
    def channels(self) -> tuple[int, int]:
        return self.cfg.widths[1], self.cfg.widths[2]

    def backbone(self, img):
        x = (img - 0.5) / 0.25
        feats = []
        for st in self.stages:
            x = st(x)
            feats.append(x)
        return feats

    def forward(self, img):
        """Returns (loc B x P x 4, logits B x P x (K+1))."""
        feats = self.backbone(img)
        locs, logits = [], []
        k = self.cfg.num_classes + 1
        for f, lh, ch in zip((feats[2], feats[3]), self.loc, self.cls):
            b = f.shape[0]
            locs.append(lh(f).permute(0, 2, 3, 1).reshape(b, -1, 4))
            logits.append(ch(f).permute(0, 2, 3, 1).reshape(b, -1, k))
        return torch.cat(locs, 1), torch.cat(logits, 1)


def default_boxes(cfg: SemConfig) -> torch.Tensor:
    """Priors as (cx, cy, w, h) in pixels, ordered to match the head outputs."""
    out = []
    for stride, sizes in zip((8, 16), cfg.box_sizes):
        n = cfg.image_size // stride
        for i in range(n):
            for j in range(n):
                for s in sizes:
                    out.append([(j + 0.5) * stride, (i + 0.5) * stride, s, s])
    return torch.tensor(out, dtype=torch.float32)


def _corners(cxcywh):
    return torch.cat([cxcywh[:, :2] - cxcywh[:, 2:] / 2, cxcywh[:, :2] + cxcywh[:, 2:] / 2], 1)


def encode(boxes, priors):
    cxcy = (boxes[:, :2] + boxes[:, 2:]) / 2
    wh = boxes[:, 2:] - boxes[:, :2]
    return torch.cat(
        [(cxcy - priors[:, :2]) / (VARIANCES[0] * priors[:, 2:]), torch.log(wh / priors[:, 2:]) / VARIANCES[1]], 1
    )


def decode(loc, priors):
    cxcy = priors[:, :2] + loc[:, :2] * VARIANCES[0] * priors[:, 2:]
    wh = priors[:, 2:] * torch.exp(loc[:, 2:] * VARIANCES[1])
    return torch.cat([cxcy - wh / 2, cxcy + wh / 2], 1)


def match(boxes, labels, priors, threshold=0.5):
    """Per-prior regression targets and class labels (0 = background)."""
    pri = _corners(priors)
    if len(boxes) == 0:
        return torch.zeros_like(priors), torch.zeros(len(priors), dtype=torch.long)
    iou = box_iou(boxes, pri)  # G x P
    best_gt_iou, best_gt = iou.max(0)
    best_prior = iou.argmax(1)
    best_gt_iou[best_prior] = 2.0
    best_gt[best_prior] = torch.arange(len(boxes))
    cls = labels[best_gt].clone()
    cls[best_gt_iou < threshold] = 0
    return encode(boxes[best_gt], priors), cls


def multibox_loss(loc, logits, targets, priors):
    """Smooth-L1 on positives + cross entropy with 3:1 hard negative mining."""
    loc_t, cls_t = zip(*(match(b, l, priors) for b, l in targets))
    loc_t, cls_t = torch.stack(loc_t), torch.stack(cls_t)
    pos = cls_t > 0
    n_pos = pos.sum().clamp(min=1)
    loc_loss = F.smooth_l1_loss(loc[pos], loc_t[pos], reduction="sum")
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), cls_t.reshape(-1), reduction="none").reshape(cls_t.shape)
    mine = ce.detach().clone()
    mine[pos] = 0
    rank = mine.argsort(1, descending=True).argsort(1)
    neg = rank < (NEG_POS_RATIO * pos.sum(1, keepdim=True)).clamp(max=pos.shape[1] - 1)
    cls_loss = ce[pos | neg].sum()
    return (loc_loss + cls_loss) / n_pos


def _batches(corpus, batch, rng):
    order = rng.permutation(len(corpus))
    for k in range(0, len(order), batch):
        items = [corpus[i] for i in order[k : k + batch]]
        imgs = torch.tensor(np.stack([s.image for s in items]), dtype=torch.float32).permute(0, 3, 1, 2)
        targets = [
            (torch.tensor(s.boxes, dtype=torch.float32), torch.tensor(s.labels, dtype=torch.long)) for s in items
        ]
        yield k // batch, imgs, targets


def pretrain_sem(corpus: list[ToyDetectionSample], cfg: SemConfig = SemConfig(), log=None):
    """Train backbone + heads with momentum-free SGD, then freeze; returns (model, epoch losses)."""
    if not corpus:
        raise EmptyCorpus("empty detection corpus")
    torch.manual_seed(cfg.seed)
    model = SEM(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.0)
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        total, count = 0.0, 0
        for bid, imgs, targets in _batches(corpus, cfg.batch, rng):
            loc, logits = model(imgs)
            loss = multibox_loss(loc, logits, targets, model.priors)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"sem epoch {epoch} batch {bid}", loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(targets)
            count += len(targets)
        history.append(total / count)
        if log:
            log(f"sem epoch {epoch}: loss {history[-1]:.4f}")
    freeze(model)
    return model, history


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def detect(model: SEM, img: torch.Tensor, score_thresh=0.3, iou_thresh=0.45, max_det=20):
    """Per-image list of (boxes N x 4, labels N, scores N)."""
    loc, logits = model(img)
    probs = logits.softmax(-1)
    out = []
    for b in range(img.shape[0]):
        boxes = decode(loc[b], model.priors)
        scores, labels = probs[b, :, 1:].max(-1)
        keep = scores > score_thresh
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep] + 1
        sel = []
        for c in labels.unique():
            idx = torch.nonzero(labels == c).flatten()
            sel.append(idx[nms(boxes[idx], scores[idx], iou_thresh)])
        sel = torch.cat(sel) if sel else torch.zeros(0, dtype=torch.long)
        sel = sel[scores[sel].argsort(descending=True)][:max_det]
        out.append((boxes[sel], labels[sel], scores[sel]))
    return out


def detection_recall(model: SEM, corpus: list[ToyDetectionSample], iou=0.5, score_thresh=0.3) -> float:
    """Fraction of ground-truth boxes found by a same-class detection with IoU >= ``iou``."""
    hit = total = 0
    for k in range(0, len(corpus), 64):
        items = corpus[k : k + 64]
        imgs = torch.tensor(np.stack([s.image for s in items]), dtype=torch.float32).permute(0, 3, 1, 2)
        for s, (boxes, labels, _) in zip(items, detect(model, imgs, score_thresh)):
            gt = torch.tensor(s.boxes, dtype=torch.float32)
            total += len(gt)
            if len(boxes) == 0 or len(gt) == 0:
                continue
            ious = box_iou(gt, boxes)
            same = torch.tensor(s.labels)[:, None] == labels[None, :]
            hit += int(((ious >= iou) & same).any(1).sum())
    return hit / max(total, 1)


@torch.no_grad()
def extract_semantic(i_gt: torch.Tensor, model: SEM) -> SemanticFeatures:
    """Semantic features at strides 4 and 8 from the clean overlap image."""
    size = model.cfg.image_size
    if i_gt.dim() != 4 or i_gt.shape[1] != 3 or tuple(i_gt.shape[2:]) != (size, size):
        raise ShapeMismatch(f"expected B x 3 x {size} x {size}, got {tuple(i_gt.shape)}")
    feats = model.backbone(i_gt)
    return SemanticFeatures(feats[1], feats[2])
