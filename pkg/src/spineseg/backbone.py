"""Pluggable multi-scale backbones.

A backbone maps a (B, C_in, H, W) image to four feature stages at strides
4, 8, 16 and 32 with non-decreasing channel widths. New backbones register
under a name so configs can select them; pretrained externals plug in the
same way provided they emit the four-stage contract (grayscale inputs are
replicated to three channels for backbones that expect RGB).
"""

import torch
import torch.nn as nn

BACKBONE_REGISTRY = {}

STAGE_STRIDES = (4, 8, 16, 32)


def register_backbone(name):
    """Class decorator adding a backbone constructor to the registry."""

    def wrap(cls):
        BACKBONE_REGISTRY[name] = cls
        return cls

    return wrap


def build_backbone(name, **kwargs):
    if name not in BACKBONE_REGISTRY:
        known = ", ".join(sorted(BACKBONE_REGISTRY))
        raise KeyError(f"unknown backbone '{name}' (registered: {known})")
    return BACKBONE_REGISTRY[name](**kwargs)


def check_input_size(h, w):
    if h % 32 != 0 or w % 32 != 0:
        hint_h, hint_w = ((h + 31) // 32) * 32, ((w + 31) // 32) * 32
        raise ValueError(
            f"input size {h}x{w} is not divisible by 32; resize or pad to "
            f"{hint_h}x{hint_w}"
        )


def _stage(in_ch, out_ch, stride):
    groups = min(8, out_ch)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.GELU(),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.GELU(),
    )


@register_backbone("tiny_conv")
class TinyConvBackbone(nn.Module):
    """Small trainable convolutional backbone for desk-scale runs.

    Strided 3x3 convolution blocks with GroupNorm produce the four stages;
    default widths are (16, 32, 64, 128).
    """

    def __init__(self, in_channels=1, widths=(16, 32, 64, 128)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("exactly four stage widths required")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(min(8, widths[0]), widths[0]),
            nn.GELU(),
        )
        self.stage1 = _stage(widths[0], widths[0], stride=2)  # stride 4
        self.stage2 = _stage(widths[0], widths[1], stride=2)  # stride 8
        self.stage3 = _stage(widths[1], widths[2], stride=2)  # stride 16
        self.stage4 = _stage(widths[2], widths[3], stride=2)  # stride 32

    def forward(self, x):
        if x.dim() != 4:
            raise ValueError("expected a (B, C, H, W) image batch")
        check_input_size(x.shape[2], x.shape[3])
        s4 = self.stage1(self.stem(x))
        s8 = self.stage2(s4)
        s16 = self.stage3(s8)
        s32 = self.stage4(s16)
        return [s4, s8, s16, s32]


class ReplicateToRGB(nn.Module):
    """Adapter repeating a single-channel image to the three channels most
    pretrained backbones expect."""

    def __init__(self, backbone):
        super().__init__()
        self.backbone = backbone

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.backbone(x)
