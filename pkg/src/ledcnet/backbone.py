"""LDCNet: a ConvNeXt-flavoured densely connected encoder.

Stem (4x4 patchify, stride 4) followed by four dense stages separated by
LN -> 1x1 -> 2x2 average-pool transitions. Each stage emits its full dense
concatenation, giving feature maps at strides 4, 8, 16 and 32.
"""
import torch
import torch.nn as nn

from .config import BackboneConfig
from .errors import ShapeError
from .layers import DepthwiseSeparableConv, LayerNorm2d

STRIDES = (4, 8, 16, 32)


class DenseBottleneck(nn.Module):
    """Dual-branch bottleneck: 7x7 and 3x3 depthwise-separable branches are
    summed, normalized, projected to ``growth`` channels and appended to the
    input.
    """

    def __init__(self, in_channels, growth, expansion=2):
        super().__init__()
        mid = expansion * growth
        self.in_channels = in_channels
        self.growth = growth
        self.branch_a = DepthwiseSeparableConv(in_channels, mid, 7)
        self.branch_b = DepthwiseSeparableConv(in_channels, mid, 3)
        self.norm = LayerNorm2d(mid)
        self.fuse = nn.Conv2d(mid, growth, 1)
        self.act = nn.GELU()

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"DenseBottleneck expects {self.in_channels} channels, got {x.shape[1]}")
        y = self.norm(self.branch_a(x) + self.branch_b(x))
        y = self.act(self.fuse(y))
        return torch.cat([x, y], dim=1)


class Transition(nn.Sequential):
    def __init__(self, in_channels, out_channels):
        super().__init__(
            LayerNorm2d(in_channels),
            nn.Conv2d(in_channels, out_channels, 1),
            # ceil_mode only matters for maps with an odd side (toy inputs).
            nn.AvgPool2d(2, 2, ceil_mode=True),
        )


class DenseStage(nn.Sequential):
    def __init__(self, in_channels, depth, growth, expansion):
        blocks = [DenseBottleneck(in_channels + i * growth, growth, expansion)
                  for i in range(depth)]
        super().__init__(*blocks)
        self.out_channels = in_channels + depth * growth


class Stem(nn.Sequential):
    def __init__(self, in_channels, stem_width, out_channels):
        layers = [nn.Conv2d(in_channels, stem_width, 4, stride=4), LayerNorm2d(stem_width)]
        if stem_width != out_channels:
            layers.append(nn.Conv2d(stem_width, out_channels, 1))
        super().__init__(*layers)


class LDCNet(nn.Module):
    def __init__(self, config: BackboneConfig, in_channels=3):
        super().__init__()
        self.config = config
        widths, depths = config.stage_widths, config.stage_depths
        self.stem = Stem(in_channels, config.stem_width, widths[0])
        self.stages = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for i in range(4):
            stage = DenseStage(widths[i], depths[i], config.growth, config.bottleneck_expansion)
            self.stages.append(stage)
            if i < 3:
                self.transitions.append(Transition(stage.out_channels, widths[i + 1]))
        self.out_channels = [s.out_channels for s in self.stages]
        # Inputs must be divisible by this; lowered only by gradient checks on tiny inputs.
        self.input_multiple = STRIDES[-1]

    def check_input(self, images):
        if images.dim() != 4:
            raise ShapeError(f"expected a 4-axis (N, C, H, W) array, got shape {tuple(images.shape)}")
        for axis, name in ((2, "height"), (3, "width")):
            size = images.shape[axis]
            if size % self.input_multiple or size == 0:
                raise ShapeError(
                    f"input {name} (axis {axis}) = {size} is not a multiple of "
                    f"{self.input_multiple}")

    def forward(self, images):
        self.check_input(images)
        x = self.stem(images)
        features = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            features.append(x)
            if i < 3:
                x = self.transitions[i](x)
        return features


def build_backbone(config: BackboneConfig, in_channels=3) -> LDCNet:
    return LDCNet(config, in_channels)


def count_dense_blocks(backbone: LDCNet) -> int:
    return sum(isinstance(m, DenseBottleneck) for m in backbone.modules())
