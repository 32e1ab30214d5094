"""Small building blocks shared by the backbone and the decoder."""
import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis at every spatial location of an NCHW map."""

    def __init__(self, channels, eps=1e-6, bias=True):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels)) if bias else None

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, (self.channels,), self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)

    def extra_repr(self):
        return f"{self.channels}, eps={self.eps}"


class DepthwiseSeparableConv(nn.Module):
    """k x k depthwise convolution followed by a 1x1 pointwise projection."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1,
                 padding_mode="zeros", bias=True):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.depthwise = nn.Conv2d(in_channels, in_channels, kernel_size, padding=pad,
                                   dilation=dilation, groups=in_channels, bias=False,
                                   padding_mode=padding_mode)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=bias)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels, out_channels, kernel_size=1, dilation=1,
                 padding_mode="zeros"):
        pad = dilation * (kernel_size - 1) // 2
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, padding=pad,
                      dilation=dilation, bias=False, padding_mode=padding_mode),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class Resize(nn.Module):
    """Interpolate to an explicit size (given at call time) or by a fixed factor.

    A module rather than a bare ``F.interpolate`` call so the profiler can
    count it.
    """

    def __init__(self, scale_factor=None, mode="bilinear"):
        super().__init__()
        self.scale_factor = scale_factor
        self.mode = mode

    def forward(self, x, size=None):
        if size is None:
            if self.scale_factor is None:
                raise ValueError("Resize needs either a size or a scale_factor")
            size = (x.shape[-2] * self.scale_factor, x.shape[-1] * self.scale_factor)
        size = tuple(int(s) for s in size)
        if tuple(x.shape[-2:]) == size:
            return x
        if self.mode == "nearest":
            return F.interpolate(x, size=size, mode="nearest")
        return F.interpolate(x, size=size, mode=self.mode, align_corners=False)

    def extra_repr(self):
        return f"scale_factor={self.scale_factor}, mode={self.mode}"
