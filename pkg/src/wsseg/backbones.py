"""Five-stage convolutional backbones shared by the classifier, IRNet and segmenter.

Every backbone returns the list of its five stage outputs. Nominal strides are
2, 4, 8, 16, 32; ``output_stride`` swaps stride for dilation in the last
stages (16: stage 5 dilated by 2; 8: stages 4 and 5 dilated by 2 and 4).
"""

import torch.nn as nn
from torchvision import models

from .errors import ConfigError

BACKBONES = ("toy-cnn", "resnet50-like", "seresnext50-like", "vgg16-like")


def conv_bn(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _stage_plan(output_stride):
    """(stride, dilation) for stages 4 and 5."""
    plans = {32: ((2, 1), (2, 1)), 16: ((2, 1), (1, 2)), 8: ((1, 2), (1, 4))}
    if output_stride not in plans:
        raise ConfigError(f"output_stride must be one of 8, 16, 32, got {output_stride}")
    return plans[output_stride]


def conv1x1_bn(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True))


class ToyBackbone(nn.Module):
    """Three strided 3x3 blocks then 1x1 blocks; CPU friendly.

    The receptive field stays at 15 px so stride-8 features stay local, which keeps
    CAMs on the object rather than smeared over the 64 px canvas. Dilation is a
    no-op for 1x1 kernels, so only the stride plan matters in stages 4-5.
    """

    head_kernel = 1

    def __init__(self, in_channels=3, widths=(16, 32, 48, 64, 96), output_stride=8):
        super().__init__()
        (s4, _), (s5, _) = _stage_plan(output_stride)
        w = widths
        self.stages = nn.ModuleList([
            conv_bn(in_channels, w[0], stride=2),
            nn.Sequential(conv_bn(w[0], w[1], stride=2), conv1x1_bn(w[1], w[1])),
            nn.Sequential(conv_bn(w[1], w[2], stride=2), conv1x1_bn(w[2], w[2])),
            conv1x1_bn(w[2], w[3], stride=s4),
            conv1x1_bn(w[3], w[4], stride=s5),
        ])
        self.channels = list(widths)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, channels // reduction, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.fc(x)


def _add_squeeze_excite(block):
    """Insert SE recalibration after the last BN of a torchvision Bottleneck."""
    block.bn3 = nn.Sequential(block.bn3, SqueezeExcite(block.bn3.num_features))
    return block


class ResNetBackbone(nn.Module):
    head_kernel = 3

    def __init__(self, variant="resnet50-like", in_channels=3, output_stride=8):
        super().__init__()
        dil = {8: [False, True, True], 16: [False, False, True], 32: [False, False, False]}
        if output_stride not in dil:
            raise ConfigError(f"output_stride must be one of 8, 16, 32, got {output_stride}")
        if variant == "resnet50-like":
            net = models.resnet50(weights=None, replace_stride_with_dilation=dil[output_stride])
        else:
            net = models.resnext50_32x4d(weights=None, replace_stride_with_dilation=dil[output_stride])
            for layer in (net.layer1, net.layer2, net.layer3, net.layer4):
                for block in layer:
                    _add_squeeze_excite(block)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu),
            nn.Sequential(net.maxpool, net.layer1),
            net.layer2,
            net.layer3,
            net.layer4,
        ])
        self.channels = [64, 256, 512, 1024, 2048]

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGGBackbone(nn.Module):
    """VGG16 with batch norm; pools use ceil mode so sizes follow ceil(H / stride)."""

    head_kernel = 3

    def __init__(self, in_channels=3, output_stride=8):
        super().__init__()
        (s4, d4), (s5, _) = _stage_plan(output_stride)
        cfg = [(64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)]
        # (pool stride, conv dilation) per stage; a dropped pool dilates the next stage
        plan = [(2, 1), (2, 1), (2, 1), (s4, 1), (s5, d4)]
        stages, cin = [], in_channels
        for widths, (pool_stride, dilation) in zip(cfg, plan):
            layers = []
            for cout in widths:
                layers.append(conv_bn(cin, cout, dilation=dilation))
                cin = cout
            if pool_stride == 2:
                layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.channels = [64, 128, 256, 512, 512]

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def build_backbone(backbone_id, in_channels=3, output_stride=8):
    if backbone_id == "toy-cnn":
        return ToyBackbone(in_channels, output_stride=output_stride)
    if backbone_id in ("resnet50-like", "seresnext50-like"):
        return ResNetBackbone(backbone_id, in_channels, output_stride)
    if backbone_id == "vgg16-like":
        return VGGBackbone(in_channels, output_stride)
    raise ConfigError(f"unknown backbone {backbone_id!r}; expected one of {BACKBONES}")
