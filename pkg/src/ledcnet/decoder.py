"""Dual-context decoder: ASPP per level, FPN fusion, OCR attention, refinement head."""
import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ASPPConfig, ModelConfig, OCRConfig
from .errors import ParameterError, ShapeError
from .layers import ConvBNReLU, DepthwiseSeparableConv, Resize


class DecoderOutput(NamedTuple):
    coarse_logits: torch.Tensor
    refined_logits: torch.Tensor


# -- functional primitives ---------------------------------------------------

def dilated_conv(x, weight, rate, bias=None, padding_mode="zeros"):
    """2-D convolution whose kernel taps are ``rate`` pixels apart.

    ``y[i] = sum_k x[i + rate * k] * w[k]`` with the kernel centred on ``i``;
    padding of ``rate * (k - 1) / 2`` keeps the spatial size.
    """
    if rate < 1:
        raise ParameterError(f"dilation rate must be >= 1, got {rate}")
    kh, kw = weight.shape[-2:]
    if kh != kw or kh % 2 == 0:
        raise ParameterError(f"kernel must be square with an odd side, got {kh}x{kw}")
    pad = rate * (kh - 1) // 2
    if padding_mode == "zeros":
        return F.conv2d(x, weight, bias, padding=pad, dilation=rate)
    x = F.pad(x, (pad, pad, pad, pad), mode=padding_mode)
    return F.conv2d(x, weight, bias, dilation=rate)


def attention(query, key, value, scale=1.0, return_weights=False):
    """Softmax attention over column vectors.

    Shapes: query (..., d, Nq), key (..., d, Nkv), value (..., c, Nkv) ->
    output (..., c, Nq). Weights have shape (..., Nq, Nkv) and each row sums
    to one.
    """
    if query.shape[-2] != key.shape[-2]:
        raise ShapeError(
            f"query depth {query.shape[-2]} does not match key depth {key.shape[-2]}")
    if key.shape[-1] != value.shape[-1]:
        raise ShapeError(
            f"{key.shape[-1]} keys but {value.shape[-1]} values")
    logits = torch.matmul(query.transpose(-1, -2), key) * scale
    weights = torch.softmax(logits, dim=-1)
    out = torch.matmul(value, weights.transpose(-1, -2))
    return (out, weights) if return_weights else out


def scaled_dot_attention(query, key, value, return_weights=False):
    return attention(query, key, value, 1.0 / math.sqrt(query.shape[-2]), return_weights)


def spatial_softmax(region_logits):
    """(N, K, h, w) -> (N, K, h*w), softmax over pixels for every region."""
    n, k = region_logits.shape[:2]
    return torch.softmax(region_logits.reshape(n, k, -1), dim=-1)


def gather_regions(pixel_features, region_logits):
    """Region representations ``(N, K, C)``: pixel features averaged with
    per-region spatial-softmax weights."""
    if pixel_features.shape[0] != region_logits.shape[0] or \
            pixel_features.shape[-2:] != region_logits.shape[-2:]:
        raise ShapeError(
            f"features {tuple(pixel_features.shape)} and region logits "
            f"{tuple(region_logits.shape)} disagree on batch or spatial size")
    n, c = pixel_features.shape[:2]
    probs = spatial_softmax(region_logits)
    feats = pixel_features.reshape(n, c, -1)
    return torch.matmul(probs, feats.transpose(1, 2))


# -- modules -------------------------------------------------------------------

class SpatialGather(nn.Module):
    def forward(self, pixel_features, region_logits):
        return gather_regions(pixel_features, region_logits)


class RegionAttention(nn.Module):
    """Parameter-free attention step, kept as a module so it can be profiled."""

    def __init__(self, scale=1.0):
        super().__init__()
        self.scale = scale

    def forward(self, query, key, value):
        return attention(query, key, value, self.scale)


class ASPP(nn.Module):
    """1x1 branch, one dilated 3x3 branch per rate, optional image-pool branch,
    concatenated and fused by a 1x1 projection.

    Dilated branches pad by replication so a constant input stays constant.
    """

    def __init__(self, in_channels, cfg: ASPPConfig):
        super().__init__()
        out = cfg.out_channels
        self.in_channels = in_channels
        self.branches = nn.ModuleList([ConvBNReLU(in_channels, out, 1)])
        for rate in cfg.dilation_rates:
            self.branches.append(
                ConvBNReLU(in_channels, out, 3, dilation=rate, padding_mode="replicate"))
        self.pool = None
        if cfg.include_global_pool_branch:
            # no BN: a 1x1 map with batch 1 has no batch statistics
            self.pool = nn.Sequential(
                nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_channels, out, 1), nn.ReLU(inplace=True))
        n_branches = len(self.branches) + (self.pool is not None)
        self.project = ConvBNReLU(n_branches * out, out, 1)
        self.out_channels = out

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"ASPP expects {self.in_channels} channels, got {x.shape[1]}")
        outs = [branch(x) for branch in self.branches]
        if self.pool is not None:
            outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class FPNFuse(nn.Module):
    """1x1 laterals to a common width, resampled to the first (finest) map and
    concatenated."""

    def __init__(self, in_channels_list, width, mode="bilinear"):
        super().__init__()
        self.laterals = nn.ModuleList(ConvBNReLU(c, width, 1) for c in in_channels_list)
        self.resize = Resize(mode=mode)
        self.out_channels = width * len(in_channels_list)

    def forward(self, features):
        if len(features) != len(self.laterals):
            raise ShapeError(f"expected {len(self.laterals)} feature maps, got {len(features)}")
        batches = {f.shape[0] for f in features}
        if len(batches) != 1:
            raise ShapeError(f"feature maps have mismatched batch sizes {sorted(batches)}")
        size = features[0].shape[-2:]
        return torch.cat([self.resize(lat(f), size) for lat, f in zip(self.laterals, features)],
                         dim=1)


class OCR(nn.Module):
    """Object-contextual representation head.

    Pixel features -> soft class regions (coarse logits) -> region
    representations -> pixel/region attention -> contextual features fused
    with the pixel features.
    """

    def __init__(self, in_channels, cfg: OCRConfig):
        super().__init__()
        mid, d, k = cfg.mid_channels, cfg.key_dim, cfg.num_regions
        self.num_regions = k
        self.pixel = ConvBNReLU(in_channels, mid, 3)
        self.region_head = nn.Sequential(ConvBNReLU(mid, mid, 1), nn.Conv2d(mid, k, 1))
        self.gather = SpatialGather()
        self.phi = ConvBNReLU(mid, d, 1)
        self.psi = ConvBNReLU(mid, d, 1)
        self.value = ConvBNReLU(mid, mid, 1)
        self.attend = RegionAttention(scale=1.0)
        self.fuse = ConvBNReLU(2 * mid, mid, 1)
        self.out_channels = mid

    def soft_regions(self, pixel_features):
        """(region_logits (N,K,h,w), region_reps (N,K,mid)) from mid-width pixel features."""
        logits = self.region_head(pixel_features)
        return logits, self.gather(pixel_features, logits)

    @staticmethod
    def _regions_as_map(region_reps):
        # (N, K, C) -> (N, C, K, 1) so 1x1 conv/BN apply per region
        return region_reps.transpose(1, 2).unsqueeze(-1)

    def relation_terms(self, pixel_features, region_reps):
        """phi(x_i) as (N, d, HW) and psi(f_k) as (N, d, K)."""
        n = pixel_features.shape[0]
        query = self.phi(pixel_features).reshape(n, -1, pixel_features.shape[-2] * pixel_features.shape[-1])
        key = self.psi(self._regions_as_map(region_reps)).squeeze(-1)
        return query, key

    def transform(self, region_reps):
        return self.value(self._regions_as_map(region_reps)).squeeze(-1)

    def pixel_region_weights(self, pixel_features, region_reps):
        """w[n, i, k]: softmax over regions of phi(x_i)^T psi(f_k)."""
        query, key = self.relation_terms(pixel_features, region_reps)
        return torch.softmax(torch.matmul(query.transpose(1, 2), key), dim=-1)

    def context(self, pixel_features, region_reps):
        query, key = self.relation_terms(pixel_features, region_reps)
        z = self.attend(query, key, self.transform(region_reps))
        return z.reshape(pixel_features.shape[0], -1, *pixel_features.shape[-2:])

    def forward(self, x):
        feats = self.pixel(x)
        logits, reps = self.soft_regions(feats)
        z = self.context(feats, reps)
        return self.fuse(torch.cat([feats, z], dim=1)), logits


class RefinementHead(nn.Module):
    def __init__(self, in_channels, num_classes, upsample=4):
        super().__init__()
        self.dsconv = DepthwiseSeparableConv(in_channels, in_channels, 3)
        self.bn = nn.BatchNorm2d(in_channels)
        self.act = nn.ReLU(inplace=True)
        self.classifier = nn.Conv2d(in_channels, num_classes, 1)
        self.upsample = Resize(scale_factor=upsample)

    def forward(self, x):
        x = self.act(self.bn(self.dsconv(x)))
        return self.upsample(self.classifier(x))


class ContextDecoder(nn.Module):
    """ASPP on the stride 4/8/16 maps (toggleable), FPN over those plus the
    stride-32 lateral, OCR (toggleable), refinement head.

    With both toggles off this is the plain FPN + head baseline.
    """

    def __init__(self, cfg: ModelConfig, in_channels_list):
        super().__init__()
        if len(in_channels_list) != 4:
            raise ShapeError(f"decoder needs 4 input widths, got {len(in_channels_list)}")
        self.use_aspp = cfg.use_aspp
        self.use_ocr = cfg.use_ocr
        lateral_in = list(in_channels_list)
        self.aspp = None
        if cfg.use_aspp:
            self.aspp = nn.ModuleList(ASPP(c, cfg.aspp) for c in in_channels_list[:3])
            lateral_in[:3] = [cfg.aspp.out_channels] * 3
        self.fpn = FPNFuse(lateral_in, cfg.fpn_width)
        head_in = self.fpn.out_channels
        self.ocr = None
        if cfg.use_ocr:
            self.ocr = OCR(head_in, cfg.ocr)
            head_in = self.ocr.out_channels
        self.head = RefinementHead(head_in, cfg.num_classes)
        self.coarse_upsample = Resize(scale_factor=4)

    def forward(self, features):
        if len(features) < 4:
            raise ShapeError(f"decoder needs 4 feature maps, got {len(features)}")
        features = list(features[:4])
        if self.aspp is not None:
            features[:3] = [aspp(f) for aspp, f in zip(self.aspp, features[:3])]
        x = self.fpn(features)
        if self.ocr is None:
            refined = self.head(x)
            return DecoderOutput(refined.clone(), refined)
        x, coarse = self.ocr(x)
        return DecoderOutput(self.coarse_upsample(coarse), self.head(x))

