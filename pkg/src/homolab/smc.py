"""Semantic-guided constraints: structure bridge (STM), feature fusion (FMM) and L_m.

Training-only; never used at inference.  One branch per pyramid scale.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeMismatch


def conv_relu_stack(cin: int, cout: int, n: int) -> nn.Sequential:
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU()]
    return nn.Sequential(*layers)


class SmcBranch(nn.Module):
    def __init__(self, c_struct: int, c_sem: int):
        super().__init__()
        self.c_struct, self.c_sem = c_struct, c_sem
        self.stm = conv_relu_stack(c_struct, c_struct, 3)
        self.align = nn.Conv2d(c_sem, c_struct, 1)
        self.struct_stack = conv_relu_stack(c_struct, c_struct, 4)
        self.sem_stack = conv_relu_stack(c_struct, c_struct, 2)
        self.fuse_stack = conv_relu_stack(2 * c_struct, c_struct, 5)
        self.refine = conv_relu_stack(c_struct, c_struct, 1)

    def _check(self, f_t, f_se=None):
        if f_t.dim() != 4 or f_t.shape[1] != self.c_struct:
            raise ShapeMismatch(f"structural features {tuple(f_t.shape)}, expected {self.c_struct} channels")
        if f_se is not None:
            if f_se.shape[1] != self.c_sem:
                raise ShapeMismatch(f"semantic features {tuple(f_se.shape)}, expected {self.c_sem} channels")
            if f_se.shape[0] != f_t.shape[0] or f_se.shape[2:] != f_t.shape[2:]:
                raise ShapeMismatch(f"semantic {tuple(f_se.shape)} vs structural {tuple(f_t.shape)}")

    def fused(self, f_t, f_se):
        """Concatenate the structural and aligned semantic stacks, then fuse."""
        return self.fuse_stack(torch.cat([self.struct_stack(f_t), self.sem_stack(self.align(f_se))], dim=1))


def stm(f_t: torch.Tensor, branch: SmcBranch) -> torch.Tensor:
    branch._check(f_t)
    return branch.stm(f_t)


def fmm(f_t: torch.Tensor, f_se: torch.Tensor, branch: SmcBranch) -> torch.Tensor:
    branch._check(f_t, f_se)
    f_m = branch.fused(f_t, f_se)
    return f_m + branch.refine(f_m)


def loss_m(f_se: torch.Tensor, f_t: torch.Tensor, branch: SmcBranch) -> torch.Tensor:
    """Mean squared difference between STM(f_t) and FMM(f_t, f_se)."""
    return ((stm(f_t, branch) - fmm(f_t, f_se, branch)) ** 2).mean()


class SMC(nn.Module):
    def __init__(self, struct_channels: tuple[int, int], sem_channels: tuple[int, int]):
        super().__init__()
        self.quarter = SmcBranch(struct_channels[0], sem_channels[0])
        self.eighth = SmcBranch(struct_channels[1], sem_channels[1])

    def losses(self, sem_feats, struct_feats) -> tuple[torch.Tensor, torch.Tensor]:
        """(L_m at 1/8, L_m at 1/4)."""
        return (
            loss_m(sem_feats.eighth, struct_feats.eighth, self.eighth),
            loss_m(sem_feats.quarter, struct_feats.quarter, self.quarter),
        )
