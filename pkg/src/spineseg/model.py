"""Full segmentation network: backbone, scale-adaptive dual attention on the
deepest stage, structure-aware decoding, and two classifier heads whose
logit maps are summed into the final prediction.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ScaleAdaptiveDualAttention
from .backbone import build_backbone
from .structure import StructureAwareModule


@dataclass
class ModelConfig:
    backbone_name: str = "tiny_conv"
    in_channels: int = 1
    backbone_widths: tuple = (16, 32, 64, 128)
    fusion_channels: int = 64
    hidden_dim: int = 32          # token / class-query width
    mask_dim: int = 32            # class mask vector width (kept equal to hidden_dim)
    decoder_layers: int = 6
    decoder_heads: int = 1
    num_classes: int = 4
    reduction_factor: int = 8
    enable_dual_attention: bool = True
    enable_structure_module: bool = True
    structure_residual: bool = False
    mask_dot_logits: bool = False  # alternative head: class-mask/feature dot products

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if self.mask_dim != self.hidden_dim:
            raise ValueError("mask_dim must equal hidden_dim (confidence dot product)")
        return self


class PredictionPair(NamedTuple):
    """Logit maps from the structure path (p1) and the attention path (p2),
    both at input resolution."""

    p1: torch.Tensor
    p2: torch.Tensor


class FusionNeck(nn.Module):
    """Progressive top-down fusion of four backbone stages to stride 4 via
    1x1 lateral projections, bilinear upsampling and addition."""

    def __init__(self, stage_channels, out_channels):
        super().__init__()
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, out_channels, kernel_size=1) for c in stage_channels
        )

    def forward(self, stages):
        lat = [proj(s) for proj, s in zip(self.laterals, stages)]
        top = lat[-1]
        for level in reversed(range(len(lat) - 1)):
            top = lat[level] + F.interpolate(
                top, size=lat[level].shape[-2:], mode="bilinear", align_corners=False
            )
        return top


class SpineSegNet(nn.Module):
    """End-to-end segmentation graph.

    The deepest backbone stage passes through the scale-adaptive dual
    attention block, is fused top-down with the shallower stages to stride
    4 for the attention-path head, and (projected to the token width) feeds
    the structure-aware module for the structure-path head. Both heads are
    1x1 convolutions whose N-channel logits are bilinearly upsampled to the
    input resolution.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = (config or ModelConfig()).validate()
        cfg = self.config
        self.backbone = build_backbone(
            cfg.backbone_name, in_channels=cfg.in_channels, widths=cfg.backbone_widths
        )
        deep = cfg.backbone_widths[-1]
        self.dual_attention = (
            ScaleAdaptiveDualAttention(deep, cfg.reduction_factor)
            if cfg.enable_dual_attention
            else None
        )
        self.neck = FusionNeck(cfg.backbone_widths, cfg.fusion_channels)
        self.attention_head = nn.Conv2d(cfg.fusion_channels, cfg.num_classes, kernel_size=1)
        if cfg.enable_structure_module:
            self.token_proj = nn.Conv2d(deep, cfg.hidden_dim, kernel_size=1)
            self.structure = StructureAwareModule(
                cfg.hidden_dim,
                num_classes=cfg.num_classes,
                layers=cfg.decoder_layers,
                heads=cfg.decoder_heads,
                mask_dim=cfg.mask_dim,
                residual=cfg.structure_residual,
            )
            self.structure_head = nn.Conv2d(cfg.hidden_dim, cfg.num_classes, kernel_size=1)
        else:
            self.token_proj = self.structure = self.structure_head = None

    def forward(self, image, return_masks=False):
        """(B, C_in, H, W) image -> PredictionPair of (B, N, H, W) logits.

        The image is expected to be normalized to zero mean, unit variance.
        """
        size = image.shape[-2:]
        stages = self.backbone(image)
        deep = stages[-1]
        if self.dual_attention is not None:
            deep = self.dual_attention(deep)
        fused = self.neck(stages[:-1] + [deep])
        p2 = F.interpolate(
            self.attention_head(fused), size=size, mode="bilinear", align_corners=False
        )
        masks = None
        if self.structure is not None:
            tokens_in = self.token_proj(deep)
            structure_map, masks = self.structure(tokens_in)
            if self.config.mask_dot_logits:
                b, _, hs, ws = structure_map.shape
                flat = structure_map.flatten(2)  # (B, D, T)
                logits1 = torch.einsum("bnd,bdt->bnt", masks, flat).view(
                    b, self.config.num_classes, hs, ws
                )
            else:
                logits1 = self.structure_head(structure_map)
            p1 = F.interpolate(logits1, size=size, mode="bilinear", align_corners=False)
        else:
            p1 = torch.zeros_like(p2)
        pair = PredictionPair(p1=p1, p2=p2)
        return (pair, masks) if return_masks else pair


def aggregate_predictions(pair: PredictionPair) -> torch.Tensor:
    """Elementwise sum of the two logit maps, the final mixed prediction."""
    if pair.p1.shape != pair.p2.shape:
        raise ValueError(
            f"prediction shapes differ: {tuple(pair.p1.shape)} vs {tuple(pair.p2.shape)}"
        )
    return pair.p1 + pair.p2


def predict_labels(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis of (B, N, H, W) logits.

    Ties resolve to the lowest class index. Accepts torch tensors or numpy
    arrays and returns an int64 numpy array of shape (B, H, W).
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise ValueError("expected (B, N, H, W) logits")
    if logits.shape[1] < 2:
        raise ValueError("need at least two classes to segment")
    return np.argmax(logits, axis=1).astype(np.int64)
