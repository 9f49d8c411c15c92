from dataclasses import dataclass
from typing import Dict, List, Optional
import logging

import torch
import torch.nn as nn

from app.models.backbones import FeatureExtractor, build_branches, init_weights
from app.models.cmem import CrossModalEnhancement, FaceTriplet
from app.models.sfirm import SalientRefinement
from app.utils.config import ModelConfig
from app.utils.errors import ConfigurationError
from app.utils.reproducibility import seed_everything

logger = logging.getLogger(__name__)

# Table of ablation settings, row tag → ModelConfig fields
ABLATION_ROWS: Dict[str, Dict] = {
    "a": dict(use_cmem=False, use_bn2=False, use_attention=False, use_hfaom=False, plain_cbam=False),
    "b": dict(use_cmem=False, use_bn2=True, use_attention=False, use_hfaom=False, plain_cbam=False),
    "c": dict(use_cmem=True, use_bn2=True, use_attention=False, use_hfaom=False, plain_cbam=False),
    "d": dict(use_cmem=True, use_bn2=True, use_attention=False, use_hfaom=True, plain_cbam=False),
    "e": dict(use_cmem=True, use_bn2=True, use_attention=True, use_hfaom=True,
              spatial_parts=1, channel_groups=1, allow_uneven_channels=False, plain_cbam=True),
    "f": dict(use_cmem=True, use_bn2=True, use_attention=True, use_hfaom=True,
              spatial_parts=4, channel_groups=1, allow_uneven_channels=False, plain_cbam=False),
    "g": dict(use_cmem=True, use_bn2=True, use_attention=True, use_hfaom=True,
              spatial_parts=1, channel_groups=4, allow_uneven_channels=False, plain_cbam=False),
    "h": dict(use_cmem=True, use_bn2=True, use_attention=True, use_hfaom=True,
              spatial_parts=4, channel_groups=4, allow_uneven_channels=False, plain_cbam=False),
    # 512 channels are not divisible by 9
    "i": dict(use_cmem=True, use_bn2=True, use_attention=True, use_hfaom=True,
              spatial_parts=9, channel_groups=9, allow_uneven_channels=True, plain_cbam=False),
}

ABLATION_LABELS = {
    "a": "Basic Network I",
    "b": "+BN II",
    "c": "+CMEM",
    "d": "+HFAOM",
    "e": "+CBAM",
    "f": "CBAM-S4",
    "g": "CBAM-C4",
    "h": "CBAM-S4C4",
    "i": "CBAM-S9C9",
}


def apply_ablation_row(config: ModelConfig, row: str) -> ModelConfig:
    """
    Derive the model configuration of one ablation row.

    Raises:
        ConfigurationError: If the row tag is unknown
    """
    if row not in ABLATION_ROWS:
        raise ConfigurationError(f"Unknown ablation row '{row}', expected one of {sorted(ABLATION_ROWS)}")
    return config.model_copy(update={**ABLATION_ROWS[row], "ablation_row": row})


def parse_rows(spec: str) -> List[str]:
    """Parse 'a..i' or 'a,c,h' into row tags."""
    spec = spec.strip()
    if ".." in spec:
        start, end = (part.strip() for part in spec.split("..", 1))
        rows = [chr(c) for c in range(ord(start), ord(end) + 1)] if start and end else []
    else:
        rows = [part.strip() for part in spec.split(",") if part.strip()]
    unknown = [row for row in rows if row not in ABLATION_ROWS]
    if unknown or not rows:
        raise ConfigurationError(f"Unknown ablation rows in '{spec}': {unknown}")
    return rows


@dataclass
class CMNetOutput:
    logits: torch.Tensor
    fused: torch.Tensor
    refined: torch.Tensor
    o_se: torch.Tensor
    f_left: Optional[torch.Tensor] = None
    f_right: Optional[torch.Tensor] = None


class CMNet(nn.Module):
    """Cross-modal enhancement → salient refinement → GAP → affine head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        sb, ub, lb = build_branches(config)
        if config.use_cmem:
            self.cmem: Optional[CrossModalEnhancement] = CrossModalEnhancement(sb, ub, lb, config.mirror_right)
            self.structural: Optional[FeatureExtractor] = None
        else:
            self.cmem = None
            self.structural = sb
        self.sfirm = SalientRefinement(config, in_channels=sb.out_channels)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(self.sfirm.out_channels, config.num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def feature_extractors(self) -> List[FeatureExtractor]:
        """Distinct backbone instances (shared branches appear once)."""
        candidates = []
        if self.cmem is not None:
            candidates.extend([self.cmem.sb, self.cmem.ub, self.cmem.lb])
        else:
            candidates.append(self.structural)
        if self.sfirm.bn2 is not None:
            candidates.append(self.sfirm.bn2)
        unique: List[FeatureExtractor] = []
        for extractor in candidates:
            if all(extractor is not seen for seen in unique):
                unique.append(extractor)
        return unique

    def replace_head(self, num_classes: int) -> None:
        """Swap the classifier for a freshly initialized one with a new class count."""
        logger.info(f"Replacing classifier head: {self.num_classes} → {num_classes} classes")
        self.head = nn.Linear(self.sfirm.out_channels, num_classes).to(
            device=self.head.weight.device, dtype=self.head.weight.dtype
        )
        self.config = self.config.model_copy(update={"num_classes": num_classes})

    def forward_triplet(self, triplet: FaceTriplet) -> CMNetOutput:
        if self.cmem is not None:
            cm = self.cmem(triplet)
            fused, f_left, f_right = cm.fused, cm.f_left, cm.f_right
        else:
            fused, f_left, f_right = self.structural(triplet.whole), None, None
        refined = self.sfirm(fused)
        logits = self.head(self.pool(refined.refined).flatten(1))
        return CMNetOutput(
            logits=logits,
            fused=fused,
            refined=refined.refined,
            o_se=refined.o_se,
            f_left=f_left,
            f_right=f_right,
        )

    def forward(self, images: torch.Tensor) -> CMNetOutput:
        return self.forward_triplet(FaceTriplet.from_whole(images, mirror_right=self.config.mirror_right))


def build_model(config: ModelConfig, seed: int = 0) -> CMNet:
    """
    Build a CMNet with seeded, fan-based uniform initialization.

    Args:
        config (ModelConfig): Architecture switches
        seed (int): Seed for parameter initialization

    Returns:
        CMNet: Freshly initialized model
    """
    seed_everything(seed)
    model = CMNet(config)
    init_weights(model)
    params = sum(p.numel() for p in model.parameters())
    logger.info(
        f"Built CMNet (row={config.ablation_row or '-'}, sharing={config.sharing}) "
        f"with {params:,} parameters"
    )
    return model
