from typing import Callable, List, Tuple

import numpy as np
import pytest
import torch

from app.utils.config import DataConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from app.utils.data import synth_generate


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(num_classes=2, input_size=64)


@pytest.fixture
def run_config() -> RunConfig:
    """One-epoch desk-scale run on 64×64 synthetic faces."""
    return RunConfig(
        model=ModelConfig(num_classes=2, input_size=64),
        train=TrainConfig(epochs=1, batch_size=4, schedule="none"),
        data=DataConfig(n_per_class=4, val_n_per_class=2),
        evaluation=EvalConfig(batch_size=4, latency_runs=0, ablation_epochs=1),
    )


@pytest.fixture
def tiny_dataset():
    return synth_generate(seed=0, n_per_class=4, num_classes=2, size=64)


@pytest.fixture
def tiny_val_dataset():
    return synth_generate(seed=1, n_per_class=2, num_classes=2, size=64, split_tag="val")


def _central_difference(
    fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: Tuple[int, ...], eps: float
) -> float:
    original = tensor[index].item()
    with torch.no_grad():
        tensor[index] = original + eps
        plus = fn().item()
        tensor[index] = original - eps
        minus = fn().item()
        tensor[index] = original
    return (plus - minus) / (2 * eps)


@pytest.fixture
def sampled_gradient_check():
    """
    Compare autograd against central differences on the coordinates with the
    largest analytic gradient; returns the worst relative error.
    """

    def check(fn: Callable[[], torch.Tensor], inputs: List[torch.Tensor], samples: int = 4, eps: float = 1e-6) -> float:
        analytic = torch.autograd.grad(fn(), inputs)
        worst = 0.0
        for tensor, grad in zip(inputs, analytic):
            flat = grad.abs().flatten().topk(samples).indices
            for position in flat.tolist():
                index = tuple(int(i) for i in np.unravel_index(position, tuple(grad.shape)))
                numeric = _central_difference(fn, tensor, index, eps)
                exact = grad[index].item()
                worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12))
        return worst

    return check
