import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ledcnet.config import ASPPConfig, OCRConfig, apply_overrides, preset
from ledcnet.decoder import (ASPP, OCR, ContextDecoder, FPNFuse, attention, dilated_conv,
                             gather_regions, scaled_dot_attention)
from ledcnet.errors import ParameterError, ShapeError
from ledcnet.model import LEDCNet


def test_dilated_1d_analogue():
    x = torch.tensor([[[[0.0, 0, 1, 0, 0]]]])
    w = torch.zeros(1, 1, 3, 3)
    w[0, 0, 1] = 1.0
    assert dilated_conv(x, w, 2).flatten().tolist() == [1, 0, 1, 0, 1]


@pytest.mark.parametrize("rate", [1, 2, 5])
def test_identity_kernel(rate):
    x = torch.randn(1, 3, 9, 9)
    w = torch.zeros(3, 3, 3, 3)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    assert torch.equal(dilated_conv(x, w, rate), x)


def test_dilated_errors():
    with pytest.raises(ParameterError):
        dilated_conv(torch.randn(1, 1, 5, 5), torch.randn(1, 1, 3, 3), 0)
    with pytest.raises(ParameterError):
        dilated_conv(torch.randn(1, 1, 5, 5), torch.randn(1, 1, 2, 2), 1)


def _brute_dilated_replicate(x, w, r):
    """y[i, j] = sum_k x[clamp(i + r*(k - c))] * w[k], evaluated tap by tap."""
    n = x.shape[0]
    k = w.shape[0]
    c = k // 2
    y = np.zeros_like(x)
    for i, j in itertools.product(range(n), range(n)):
        for a, b in itertools.product(range(k), range(k)):
            ii = min(max(i + r * (a - c), 0), n - 1)
            jj = min(max(j + r * (b - c), 0), n - 1)
            y[i, j] += x[ii, jj] * w[a, b]
    return y


@pytest.mark.parametrize("rate", [1, 2, 3])
def test_replicate_dilated_conv_brute_force_5x5(rate):
    rng = np.random.default_rng(rate)
    w = rng.normal(size=(3, 3))
    for x in (rng.normal(size=(5, 5)), np.full((5, 5), 0.7)):
        got = dilated_conv(torch.from_numpy(x)[None, None], torch.from_numpy(w)[None, None], rate,
                           padding_mode="replicate")[0, 0].numpy()
        np.testing.assert_allclose(got, _brute_dilated_replicate(x, w, rate), atol=1e-12)
    assert np.ptp(got) < 1e-12


@torch.no_grad()
def test_aspp_constant_input_gives_constant_branches():
    aspp = ASPP(4, ASPPConfig(dilation_rates=[1, 2, 3], out_channels=5)).eval()
    x = torch.full((1, 4, 5, 5), 0.3)
    for branch in aspp.branches:
        y = branch(x)
        assert torch.allclose(y, y[..., :1, :1].expand_as(y), atol=1e-6)
    y = aspp(x)
    assert torch.allclose(y, y[..., :1, :1].expand_as(y), atol=1e-6)


def test_aspp_shape():
    aspp = ASPP(64, ASPPConfig(dilation_rates=[6, 12, 18], out_channels=64))
    assert aspp(torch.randn(1, 64, 32, 32)).shape == (1, 64, 32, 32)
    assert len(aspp.branches) == 4 and aspp.pool is not None
    with pytest.raises(ShapeError):
        aspp(torch.randn(1, 32, 32, 32))


@torch.no_grad()
def test_aspp_rate_one_is_two_branch_fuse():
    aspp = ASPP(3, ASPPConfig(dilation_rates=[1], out_channels=4,
                              include_global_pool_branch=False)).eval()
    x = torch.randn(1, 3, 8, 8)
    one = aspp.branches[0](x)
    conv, bn, relu = aspp.branches[1]
    three = relu(bn(F.conv2d(x, conv.weight, padding=1)))
    ref = aspp.project(torch.cat([one, three], 1))
    # padding modes differ only on the border ring
    torch.testing.assert_close(aspp(x)[..., 1:-1, 1:-1], ref[..., 1:-1, 1:-1])


def _naive_attention(q, k, v, scale):
    d, nq = q.shape
    out = torch.zeros(v.shape[0], nq, dtype=q.dtype)
    for i in range(nq):
        s = torch.tensor([scale * float(q[:, i] @ k[:, j]) for j in range(k.shape[1])],
                         dtype=q.dtype)
        p = torch.exp(s - s.max())
        out[:, i] = v @ (p / p.sum())
    return out


def test_attention_batched_matches_naive():
    g = torch.Generator().manual_seed(1)
    q = torch.randn(2, 4, 7, generator=g, dtype=torch.float64)
    k = torch.randn(2, 4, 3, generator=g, dtype=torch.float64)
    v = torch.randn(2, 5, 3, generator=g, dtype=torch.float64)
    out, weights = attention(q, k, v, return_weights=True)
    assert weights.shape == (2, 7, 3)
    torch.testing.assert_close(weights.sum(-1), torch.ones(2, 7, dtype=torch.float64))
    for b in range(2):
        torch.testing.assert_close(out[b], _naive_attention(q[b], k[b], v[b], 1.0), atol=1e-12, rtol=0)
        torch.testing.assert_close(scaled_dot_attention(q, k, v)[b],
                                   _naive_attention(q[b], k[b], v[b], 0.5), atol=1e-12, rtol=0)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(torch.randn(4, 7), torch.randn(3, 2), torch.randn(5, 2))
    with pytest.raises(ShapeError):
        attention(torch.randn(4, 7), torch.randn(4, 2), torch.randn(5, 3))


def test_gather_regions_is_softmax_weighted_mean():
    g = torch.Generator().manual_seed(2)
    feats = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64)
    logits = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    reps = gather_regions(feats, logits)
    for k in range(2):
        w = torch.softmax(logits[0, k].flatten(), 0)
        torch.testing.assert_close(reps[0, k], feats[0].reshape(3, -1) @ w)
    with pytest.raises(ShapeError):
        gather_regions(feats, torch.randn(1, 2, 3, 2))


def test_fpn_fuse_resamples_to_finest():
    fpn = FPNFuse([4, 6, 8, 10], 3)
    feats = [torch.randn(2, c, 16 // s, 16 // s) for c, s in zip([4, 6, 8, 10], [1, 2, 4, 8])]
    out = fpn(feats)
    assert out.shape == (2, 12, 16, 16)
    fpn.eval()
    lat = fpn.laterals[3](feats[3])
    torch.testing.assert_close(fpn(feats)[:, 9:], F.interpolate(lat, size=(16, 16), mode="bilinear",
                                                               align_corners=False))
    with pytest.raises(ShapeError):
        fpn(feats[:3])


def test_ocr_shapes():
    ocr = OCR(12, OCRConfig(num_regions=3, key_dim=4, mid_channels=6))
    aug, coarse = ocr(torch.randn(2, 12, 8, 8))
    assert aug.shape == (2, 6, 8, 8) and coarse.shape == (2, 3, 8, 8)


@pytest.mark.parametrize("use_aspp,use_ocr", list(itertools.product([False, True], repeat=2)))
def test_decoder_toggles(use_aspp, use_ocr):
    cfg = apply_overrides(preset("toy"), {"model.use_aspp": str(use_aspp),
                                          "model.use_ocr": str(use_ocr)})
    model = LEDCNet(cfg.model).eval()
    assert (model.decoder.aspp is not None) == use_aspp
    assert (model.decoder.ocr is not None) == use_ocr
    with torch.no_grad():
        out = model(torch.randn(2, 3, 64, 96))
    assert out.coarse_logits.shape == out.refined_logits.shape == (2, 3, 64, 96)
    if not use_ocr:
        assert torch.equal(out.coarse_logits, out.refined_logits)


def test_decoder_needs_four_widths():
    with pytest.raises(ShapeError):
        ContextDecoder(preset("toy").model, [1, 2, 3])
