from dataclasses import dataclass
from typing import Tuple, Union

import torch
import torch.nn.functional as F

from app.utils.errors import ConfigurationError, InputError

Scalar = Union[torch.Tensor, float]


@dataclass
class LossBundle:
    l_sl: Scalar
    l_gl: Scalar
    total: Scalar
    alpha: float


def pooled_vectors(f_left: torch.Tensor, f_right: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Global average pooling of both half-face maps.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: (v_l, v_r), each N×C

    Raises:
        InputError: If the maps differ in shape or are not N×C×H×W
    """
    if f_left.shape != f_right.shape:
        raise InputError(f"Half-face maps differ in shape: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    if f_left.dim() != 4:
        raise InputError(f"Expected N×C×H×W half-face maps, got {tuple(f_left.shape)}")
    return f_left.mean(dim=(2, 3)), f_right.mean(dim=(2, 3))


def pairwise_log_softmax(v_l: torch.Tensor, v_r: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Two-way log-softmax across the (left, right) pair at every position.

    ``x_l = log(e^v_l / (e^v_l + e^v_r))`` and symmetrically for ``x_r``;
    log_softmax subtracts the pairwise max before exponentiating.

    Raises:
        InputError: On non-finite input
    """
    if not (torch.isfinite(v_l).all() and torch.isfinite(v_r).all()):
        raise InputError("Pooled half-face vectors contain non-finite values")
    paired = torch.log_softmax(torch.stack([v_l, v_r], dim=0), dim=0)
    return paired[0], paired[1]


def symmetry_loss(f_left: torch.Tensor, f_right: torch.Tensor) -> torch.Tensor:
    """
    Symmetry loss ``L_sl = 2/(N·C) · Σ (x_l − x_r)²``.

    Since the shared log-denominator cancels, this equals
    ``2/(N·C) · Σ (v_l − v_r)²``; the log-softmax route is kept as written.
    """
    v_l, v_r = pooled_vectors(f_left, f_right)
    x_l, x_r = pairwise_log_softmax(v_l, v_r)
    n, c = x_l.shape
    return (2.0 / (n * c)) * ((x_l - x_r) ** 2).sum()


def global_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Batch-mean cross-entropy on classifier logits.

    Raises:
        InputError: If a label falls outside [0, K)
    """
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"Labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def total_loss(l_sl: Scalar, l_gl: Scalar, alpha: float) -> LossBundle:
    """
    Convex combination ``(1 − α)·L_sl + α·L_gl``.

    Raises:
        ConfigurationError: If alpha lies outside [0, 1]
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return LossBundle(l_sl=l_sl, l_gl=l_gl, total=(1 - alpha) * l_sl + alpha * l_gl, alpha=alpha)
