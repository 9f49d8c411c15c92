from collections import OrderedDict
from typing import Dict, List, Tuple
import logging

import torch
import torch.nn as nn
from torchvision import models

from app.utils.config import ModelConfig
from app.utils.errors import ConfigurationError, LoadError

logger = logging.getLogger(__name__)

# Key names follow torchvision's 18-layer residual network, so any state_dict
# saved from torchvision.models.resnet18 (or converted into its naming) maps in.
BASIC_NETWORK_I_STAGES = ("conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3")
BASIC_NETWORK_II_STAGES = ("layer4",)
OPTIONAL_KEY_SUFFIXES = ("num_batches_tracked",)


class FeatureExtractor(nn.Sequential):
    """
    An ordered run of residual stages taken from the reference network.

    Output spatial dims are ``ceil(input / stride_product)``; every strided
    layer of the reference network pads so that odd sizes round up.
    """

    def __init__(self, stages: "OrderedDict[str, nn.Module]", in_channels: int, out_channels: int, stride_product: int):
        super().__init__(stages)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride_product = stride_product

    @property
    def stage_names(self) -> List[str]:
        return [name for name, _ in self.named_children()]

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        """Spatial size this extractor produces for an input of the given size."""
        return -(-height // self.stride_product), -(-width // self.stride_product)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"Expected an N×{self.in_channels}×H×W input, got shape {tuple(x.shape)}"
            )
        return super().forward(x)


def _reference_network() -> models.ResNet:
    return models.resnet18(weights=None)


def build_basic_network_I(config: ModelConfig) -> FeatureExtractor:
    """
    Build Basic Network I: stem plus the first three residual stages.

    Args:
        config (ModelConfig): Model configuration; only input_channels is read

    Returns:
        FeatureExtractor: 3 → 256 channels, total stride 16

    Raises:
        ConfigurationError: If the configured input is not RGB
    """
    if config.input_channels != 3:
        raise ConfigurationError(
            f"Basic Network I takes 3-channel input, config asks for {config.input_channels}"
        )
    reference = _reference_network()
    stages = OrderedDict((name, getattr(reference, name)) for name in BASIC_NETWORK_I_STAGES)
    return FeatureExtractor(stages, in_channels=3, out_channels=256, stride_product=16)


def build_basic_network_II(config: ModelConfig) -> FeatureExtractor:
    """
    Build Basic Network II: the final residual stage (two blocks, four convolutions).

    Returns:
        FeatureExtractor: 256 → 512 channels, stride 2
    """
    reference = _reference_network()
    stages = OrderedDict((name, getattr(reference, name)) for name in BASIC_NETWORK_II_STAGES)
    return FeatureExtractor(stages, in_channels=256, out_channels=512, stride_product=2)


def build_branches(config: ModelConfig) -> Tuple[FeatureExtractor, FeatureExtractor, FeatureExtractor]:
    """
    Build the structural, upper and lower blocks under the configured sharing policy.

    Returns:
        Tuple[FeatureExtractor, FeatureExtractor, FeatureExtractor]: (SB, UB, LB);
            shared branches are the same module object
    """
    if config.sharing == "all_shared":
        shared = build_basic_network_I(config)
        return shared, shared, shared
    if config.sharing == "halves_shared":
        structural = build_basic_network_I(config)
        halves = build_basic_network_I(config)
        return structural, halves, halves
    if config.sharing == "independent":
        return build_basic_network_I(config), build_basic_network_I(config), build_basic_network_I(config)
    raise ConfigurationError(f"Unknown sharing policy: {config.sharing}")


def init_weights(module: nn.Module) -> None:
    """Fan-based uniform init for fresh parameters; call under a fixed seed."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            m.reset_parameters()


def load_weight_table(path: str) -> Dict[str, torch.Tensor]:
    """
    Read a key→tensor container saved with ``torch.save``.

    Raises:
        LoadError: If the file cannot be read or holds no tensor table
    """
    try:
        table = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise LoadError(f"Failed to read weights from {path}: {str(e)}")
    # checkpoints written by the engine nest the table
    for key in ("state_dict", "parameters"):
        if isinstance(table, dict) and isinstance(table.get(key), dict):
            table = table[key]
    if not isinstance(table, dict) or not all(isinstance(v, torch.Tensor) for v in table.values()):
        raise LoadError(f"{path} does not contain a named-tensor table")
    return table


def load_pretrained(model: nn.Module, weights: Dict[str, torch.Tensor]) -> int:
    """
    Copy reference-network weights into every distinct backbone of a model.

    Stem and stages 1–3 go into each Basic Network I instance (once per
    distinct parameter set, so the sharing policy decides how many copies
    happen), stage 4 into Basic Network II. The classifier head is freshly
    initialized.

    Args:
        model (nn.Module): A CMNet instance
        weights (Dict[str, torch.Tensor]): torchvision-named weight table

    Returns:
        int: Number of tensors copied

    Raises:
        LoadError: On a missing key or a shape mismatch
    """
    copied = 0
    for extractor in model.feature_extractors():
        own_state = extractor.state_dict()

        # Validate the whole table for this extractor before touching anything
        for key, own_param in own_state.items():
            if key not in weights:
                if key.endswith(OPTIONAL_KEY_SUFFIXES):
                    continue
                raise LoadError(f"Missing required key '{key}' in pretrained weights")
            if tuple(weights[key].shape) != tuple(own_param.shape):
                raise LoadError(
                    f"Shape mismatch for '{key}': model expects {tuple(own_param.shape)}, "
                    f"weights provide {tuple(weights[key].shape)}"
                )

        with torch.no_grad():
            for key, own_param in own_state.items():
                if key in weights:
                    own_param.copy_(weights[key])
                    copied += 1

    model.head.reset_parameters()
    logger.info(f"Copied {copied} pretrained tensors into {len(model.feature_extractors())} extractors")
    return copied
