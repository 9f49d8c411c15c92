from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn

from app.models.backbones import FeatureExtractor
from app.utils.errors import FusionError, InputError


def split_face(image: torch.Tensor, mirror_right: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Split face pixels at the vertical midline.

    Works on any channel-first layout (C×H×W or N×C×H×W); width is the last
    axis. The left half gets ``floor(W/2)`` columns, the right half the rest.

    Args:
        image (torch.Tensor): Face pixels, width last
        mirror_right (bool): Flip the right half horizontally

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (left, right)

    Raises:
        InputError: If the image is narrower than two columns
    """
    width = image.shape[-1]
    if width < 2:
        raise InputError(f"Cannot split an image of width {width}")
    half = width // 2
    left = image[..., :half]
    right = image[..., half:]
    if mirror_right:
        right = torch.flip(right, dims=[-1])
    return left, right


@dataclass
class FaceTriplet:
    whole: torch.Tensor
    left: torch.Tensor
    right: torch.Tensor

    @classmethod
    def from_whole(cls, whole: torch.Tensor, mirror_right: bool = False) -> "FaceTriplet":
        left, right = split_face(whole, mirror_right=mirror_right)
        return cls(whole=whole, left=left, right=right)


@dataclass
class CmemOutput:
    fused: torch.Tensor
    structural: torch.Tensor
    f_left: torch.Tensor
    f_right: torch.Tensor


def fuse(structural: torch.Tensor, f_left: torch.Tensor, f_right: torch.Tensor) -> torch.Tensor:
    """
    Width-concatenate the half-face maps and add them to the structural map.

    Raises:
        FusionError: If the halves do not tile the structural map exactly
    """
    n, c, h, w = structural.shape
    if f_left.shape[:3] != (n, c, h) or f_right.shape[:3] != (n, c, h):
        raise FusionError(
            f"Half-face maps {tuple(f_left.shape)} / {tuple(f_right.shape)} do not match "
            f"structural map {tuple(structural.shape)} outside the width axis"
        )
    if f_left.shape[3] + f_right.shape[3] != w:
        raise FusionError(
            f"Half-face feature widths {f_left.shape[3]} + {f_right.shape[3]} do not sum to "
            f"structural width {w}"
        )
    return structural + torch.cat([f_left, f_right], dim=3)


class CrossModalEnhancement(nn.Module):
    """SB on the whole face, UB/LB on the halves, fused by concat + residual add."""

    def __init__(self, sb: FeatureExtractor, ub: FeatureExtractor, lb: FeatureExtractor, mirror_right: bool = False):
        super().__init__()
        self.sb = sb
        self.ub = ub
        self.lb = lb
        self.mirror_right = mirror_right

    @property
    def out_channels(self) -> int:
        return self.sb.out_channels

    def forward(self, triplet: FaceTriplet) -> CmemOutput:
        structural = self.sb(triplet.whole)
        f_left = self.ub(triplet.left)
        f_right = self.lb(triplet.right)
        return CmemOutput(
            fused=fuse(structural, f_left, f_right),
            structural=structural,
            f_left=f_left,
            f_right=f_right,
        )


def cmem_forward(triplet: FaceTriplet, sb: FeatureExtractor, ub: FeatureExtractor, lb: FeatureExtractor) -> CmemOutput:
    """Functional form of the cross-modal enhancement module."""
    return CrossModalEnhancement(sb, ub, lb)(triplet)
