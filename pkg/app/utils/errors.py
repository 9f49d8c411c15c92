from typing import Dict, Optional


class ConfigurationError(ValueError):
    """Invalid configuration, unsupported shape contract or unknown tag."""


class InputError(ValueError):
    """Malformed tensors, images or labels handed to an operation."""


class JoinError(ValueError):
    """Tiles or channel groups that cannot be reassembled into one map."""


class MappingError(ValueError):
    """Foreign label without a counterpart in the model's classes."""


class FusionError(RuntimeError):
    """Half-face feature widths that do not add up to the structural width."""


class LoadError(RuntimeError):
    """Weight table or checkpoint that cannot be mapped into the network."""


class IngestionError(RuntimeError):
    """Dataset root without any usable class directory."""


class SamplerError(RuntimeError):
    """Class distribution that the requested sampling policy cannot serve."""


class EvaluationError(RuntimeError):
    """Model head and dataset disagree on the class set."""


class TrainingError(RuntimeError):
    """Non-finite loss during optimization."""

    def __init__(self, message: str, batch_index: int, components: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.components = components or {}


class UsageError(ValueError):
    """Command line that does not parse."""
