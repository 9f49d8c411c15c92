from dataclasses import dataclass
from math import isqrt
from typing import List, Optional
import logging

import torch
import torch.nn as nn

from app.models.backbones import build_basic_network_II
from app.utils.config import DivisionSpec, ModelConfig
from app.utils.errors import ConfigurationError, JoinError

logger = logging.getLogger(__name__)

CHANNEL_REDUCTION = 16
SPATIAL_KERNEL = 7


def split_sizes(length: int, parts: int) -> List[int]:
    """Floor-sized pieces with the remainder handed to the last pieces: 7/2 → [3, 4]."""
    base = length // parts
    sizes = [base] * parts
    for i in range(length - base * parts):
        sizes[parts - 1 - i] += 1
    return sizes


def spatial_division(fmap: torch.Tensor, parts: int) -> List[torch.Tensor]:
    """
    Cut a feature map into a √parts × √parts grid of tiles, row-major.

    Args:
        fmap (torch.Tensor): N×C×H×W map
        parts (int): 1, 4 or 9

    Returns:
        List[torch.Tensor]: Tiles, row by row

    Raises:
        ConfigurationError: If parts is not a supported square or a tile would be empty
    """
    if parts not in (1, 4, 9):
        raise ConfigurationError(f"Spatial division supports 1, 4 or 9 parts, got {parts}")
    side = isqrt(parts)
    height, width = fmap.shape[2], fmap.shape[3]
    if height < side or width < side:
        raise ConfigurationError(f"A {height}×{width} map cannot be cut into {side}×{side} tiles")

    tiles = []
    for band in torch.split(fmap, split_sizes(height, side), dim=2):
        tiles.extend(torch.split(band, split_sizes(width, side), dim=3))
    return tiles


def spatial_join(tiles: List[torch.Tensor]) -> torch.Tensor:
    """
    Reassemble a row-major grid of tiles; inverse of spatial_division.

    Raises:
        JoinError: If the tiles do not form a consistent square grid
    """
    side = isqrt(len(tiles))
    if not tiles or side * side != len(tiles):
        raise JoinError(f"{len(tiles)} tiles do not form a square grid")
    n, c = tiles[0].shape[:2]
    for tile in tiles:
        if tile.dim() != 4 or tuple(tile.shape[:2]) != (n, c):
            raise JoinError(f"Tile {tuple(tile.shape)} does not match batch/channels ({n}, {c})")

    grid = [tiles[r * side:(r + 1) * side] for r in range(side)]
    for r, row in enumerate(grid):
        for col, tile in enumerate(row):
            if tile.shape[2] != row[0].shape[2]:
                raise JoinError(f"Row {r} mixes tile heights {tile.shape[2]} and {row[0].shape[2]}")
            if tile.shape[3] != grid[0][col].shape[3]:
                raise JoinError(f"Column {col} mixes tile widths {tile.shape[3]} and {grid[0][col].shape[3]}")
    return torch.cat([torch.cat(row, dim=3) for row in grid], dim=2)


def channel_division(fmap: torch.Tensor, groups: int, allow_uneven: bool = False) -> List[torch.Tensor]:
    """
    Cut a feature map into contiguous channel groups.

    Args:
        fmap (torch.Tensor): N×C×H×W map
        groups (int): Number of groups
        allow_uneven (bool): Permit C mod groups ≠ 0 with floor-then-remainder sizes

    Raises:
        ConfigurationError: If the groups do not divide the channels (strict mode)
    """
    channels = fmap.shape[1]
    if groups < 1 or groups > channels:
        raise ConfigurationError(f"Cannot divide {channels} channels into {groups} groups")
    if channels % groups != 0 and not allow_uneven:
        raise ConfigurationError(f"{groups} groups do not divide {channels} channels")
    return list(torch.split(fmap, split_sizes(channels, groups), dim=1))


def channel_join(groups: List[torch.Tensor]) -> torch.Tensor:
    """Inverse of channel_division."""
    if not groups:
        raise JoinError("No channel groups to join")
    n, _, h, w = groups[0].shape
    for group in groups:
        if group.dim() != 4 or (group.shape[0], group.shape[2], group.shape[3]) != (n, h, w):
            raise JoinError(f"Channel group {tuple(group.shape)} does not match N×H×W = {n}×{h}×{w}")
    return torch.cat(groups, dim=1)


class ChannelAttention(nn.Module):
    """CBAM channel gate: shared two-layer MLP over avg- and max-pooled descriptors."""

    def __init__(self, channels: int, reduction: int = CHANNEL_REDUCTION):
        super().__init__()
        if channels < reduction:
            raise ConfigurationError(
                f"Channel attention needs at least {reduction} channels, got {channels}"
            )
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.max_pool = nn.AdaptiveMaxPool2d(1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(channels // reduction, channels, 1, bias=False),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(self.avg_pool(x)) + self.fc(self.max_pool(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """CBAM spatial gate: 7×7 conv over the channel-mean and channel-max planes."""

    def __init__(self, kernel_size: int = SPATIAL_KERNEL):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def pooled_planes(self, x: torch.Tensor) -> torch.Tensor:
        avg_out = torch.mean(x, dim=1, keepdim=True)
        max_out, _ = torch.max(x, dim=1, keepdim=True)
        return torch.cat([avg_out, max_out], dim=1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(self.pooled_planes(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


@dataclass
class SfirmOutput:
    base: torch.Tensor
    o_se: torch.Tensor
    refined: torch.Tensor


class SalientRefinement(nn.Module):
    """
    Three-phase refinement of the fused map.

    Phase 1 runs Basic Network II. Phase 2 applies channel attention per
    spatial tile, rejoins the tiles and uses the result as multiplicative
    weights on the phase-1 map. Phase 3 applies spatial attention per channel
    group of that output, rejoins and weights again. With plain_cbam the two
    attention modules run once each on the whole map, in sequence.
    """

    def __init__(self, config: ModelConfig, in_channels: int = 256):
        super().__init__()
        self.division: DivisionSpec = config.division
        self.sigmoid_gates = config.sigmoid_gates
        self.use_attention = config.use_attention
        self.plain_cbam = config.plain_cbam
        # test hook: replace every multiplicative weight by 1
        self.force_unit_gates = False

        self.bn2 = build_basic_network_II(config) if config.use_bn2 else None
        self.out_channels = self.bn2.out_channels if self.bn2 is not None else in_channels

        self.tile_attention: Optional[nn.ModuleList] = None
        self.group_attention: Optional[nn.ModuleList] = None
        if self.use_attention:
            tiles = 1 if self.division.share_tile_attention else self.division.spatial_parts
            self.tile_attention = nn.ModuleList(ChannelAttention(self.out_channels) for _ in range(tiles))
            self.group_attention = nn.ModuleList(
                SpatialAttention() for _ in range(self.division.channel_groups)
            )

    def _weights(self, joined: torch.Tensor) -> torch.Tensor:
        if self.force_unit_gates:
            return torch.ones_like(joined)
        if self.sigmoid_gates:
            return torch.sigmoid(joined)
        return joined

    def _tile_module(self, index: int) -> ChannelAttention:
        return self.tile_attention[0 if self.division.share_tile_attention else index]

    def forward(self, o_cmem: torch.Tensor) -> SfirmOutput:
        base = self.bn2(o_cmem) if self.bn2 is not None else o_cmem
        if not self.use_attention:
            return SfirmOutput(base=base, o_se=base, refined=base)
        if self.plain_cbam:
            o_se = self.tile_attention[0](base)
            return SfirmOutput(base=base, o_se=o_se, refined=self.group_attention[0](o_se))

        # local spatial tiles × global channel attention
        tiles = spatial_division(base, self.division.spatial_parts)
        joined = spatial_join([self._tile_module(i)(tile) for i, tile in enumerate(tiles)])
        o_se = self._weights(joined) * base

        # local channel groups × global spatial attention
        groups = channel_division(o_se, self.division.channel_groups, self.division.allow_uneven_channels)
        joined = channel_join([sa(group) for sa, group in zip(self.group_attention, groups)])
        refined = self._weights(joined) * o_se
        return SfirmOutput(base=base, o_se=o_se, refined=refined)


def sfirm_forward(o_cmem: torch.Tensor, sfirm: SalientRefinement) -> SfirmOutput:
    """Run the refinement module on a fused map."""
    return sfirm(o_cmem)
