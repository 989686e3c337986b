import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import check_gradients
from homolab.attention import (
    HSABlock,
    HsaConfig,
    QKVProjection,
    WindowAttentionBlock,
    cross_scale_index,
    downsample,
    gather_windows,
    project_qkv,
    window_merge,
    window_partition,
    windowed_attention,
)
from homolab.errors import ShapeMismatch

torch.manual_seed(0)


def _set_identity(proj):
    with torch.no_grad():
        for conv in proj.children():
            conv.weight.zero_()
            conv.weight[:, :, 0, 0] = torch.eye(conv.weight.shape[0])
            conv.bias.zero_()


def test_project_identity_and_zero():
    proj = QKVProjection(8).double()
    f = torch.ones(1, 8, 8, 8, dtype=torch.float64)
    _set_identity(proj)
    outs = project_qkv(f, downsample(f), proj)
    for o in outs:
        assert torch.all(o == 1)
    with torch.no_grad():
        for p in proj.parameters():
            p.zero_()
    for o in project_qkv(f, downsample(f), proj):
        assert torch.all(o == 0)


def test_project_matches_dense_matmul():
    g = torch.Generator().manual_seed(1)
    proj = QKVProjection(6).double()
    f = torch.randn(2, 6, 8, 10, generator=g, dtype=torch.float64)
    fd = downsample(f)
    outs = project_qkv(f, fd, proj)
    convs = [proj.q, proj.k, proj.v, proj.k_small, proj.v_small]
    srcs = [f, f, f, fd, fd]
    for out, conv, src in zip(outs, convs, srcs):
        w = conv.weight[:, :, 0, 0].detach().numpy()
        b = conv.bias.detach().numpy()
        x = src.detach().numpy()
        want = np.einsum("oc,bchw->bohw", w, x) + b[None, :, None, None]
        assert np.abs(out.detach().numpy() - want).max() < 1e-6


def test_project_shape_mismatch():
    proj = QKVProjection(4)
    with pytest.raises(ShapeMismatch):
        project_qkv(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 3, 4), proj)


def test_partition_merge_roundtrip():
    x = torch.randn(2, 3, 8, 12)
    assert torch.equal(window_merge(window_partition(x, 4), 4, 8, 12), x)


def test_single_element_window_returns_v():
    q = torch.randn(1, 3, 1, 4, dtype=torch.float64)
    k = torch.randn(1, 3, 1, 4, dtype=torch.float64)
    v = torch.randn(1, 3, 1, 4, dtype=torch.float64)
    assert torch.allclose(windowed_attention(q, k, v, heads=2), v)


def test_identical_keys_give_mean_of_values():
    q = torch.randn(2, 5, 16, 8, dtype=torch.float64)
    k = torch.randn(2, 5, 1, 8, dtype=torch.float64).expand(2, 5, 16, 8)
    v = torch.randn(2, 5, 16, 8, dtype=torch.float64)
    out = windowed_attention(q, k, v, heads=4)
    assert (out - v.mean(dim=2, keepdim=True)).abs().max() < 1e-6


def test_rows_sum_to_one_and_mask_gets_zero_weight():
    g = torch.Generator().manual_seed(3)
    q = torch.randn(1, 4, 16, 8, generator=g, dtype=torch.float64)
    k = torch.randn(1, 4, 16, 8, generator=g, dtype=torch.float64)
    v = torch.randn(1, 4, 16, 8, generator=g, dtype=torch.float64)
    mask = torch.rand(4, 16, generator=g) > 0.5
    mask[:, 0] = True
    _, w = windowed_attention(q, k, v, 2, mask, return_weights=True)
    assert (w.sum(-1) - 1).abs().max() < 1e-6
    assert torch.all(w.masked_select(~mask[None, :, None, None, :].expand_as(w)) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_key_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 3, 9, 4, generator=g, dtype=torch.float64)
    k = torch.randn(1, 3, 9, 4, generator=g, dtype=torch.float64)
    v = torch.randn(1, 3, 9, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(9, generator=g)
    a = windowed_attention(q, k, v, 2)
    b = windowed_attention(q, k[:, :, perm], v[:, :, perm], 2)
    assert (a - b).abs().max() < 1e-6


def test_cross_scale_index_covers_same_area():
    idx, mask = cross_scale_index(8, 8, 4)
    assert idx.shape == (4, 16) and mask.sum(1).tolist() == [4, 4, 4, 4]
    # window (1, 1) covers full-res rows/cols 4..7 -> half-res rows/cols 2..3 of a 4x4 map
    assert sorted(idx[3][mask[3]].tolist()) == [10, 11, 14, 15]
    idx, mask = cross_scale_index(3, 3, 1)
    assert mask.all() and idx.shape == (9, 1)


def test_gather_windows():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    idx, _ = cross_scale_index(8, 8, 4)
    g = gather_windows(x, idx)
    assert g.shape == (1, 4, 16, 1)
    assert g[0, 0, :4, 0].tolist() == [0.0, 1.0, 4.0, 5.0]


@pytest.mark.parametrize("hw", [(32, 32), (40, 24), (30, 18), (4, 4)])
def test_hsa_shape_contract(hw):
    block = HSABlock(16, HsaConfig(window=4, heads=4))
    f = torch.randn(2, 16, *hw)
    assert block(f).shape == f.shape


def test_zero_merge_is_passthrough():
    block = HSABlock(8, HsaConfig(4, 4)).double()
    with torch.no_grad():
        block.merge.weight.zero_()
        block.merge.bias.zero_()
    f = torch.randn(1, 8, 12, 12, dtype=torch.float64)
    assert torch.equal(block(f), f)


def test_heads_must_divide_channels():
    with pytest.raises(ShapeMismatch):
        HSABlock(10, HsaConfig(4, 4))


def test_hsa_parameter_count_exceeds_plain():
    hsa = sum(p.numel() for p in HSABlock(16).parameters())
    plain = sum(p.numel() for p in WindowAttentionBlock(16).parameters())
    assert hsa - plain == 2 * (16 * 16 + 16)


def test_hsa_finite_difference_gradients():
    torch.manual_seed(4)
    block = HSABlock(8, HsaConfig(window=4, heads=4)).double()
    f = torch.randn(1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    tensors = [("input", f)] + list(block.named_parameters())
    errs = check_gradients(lambda: (block(f) * target).sum(), tensors, eps=1e-3)
    assert max(errs.values()) < 1e-3, errs
