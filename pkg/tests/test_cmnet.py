import pytest
import torch

from app.models.cmnet import build_model
from app.utils.config import ModelConfig


@pytest.mark.parametrize("size", [64, 96, 128, 224])
def test_forward_shapes_follow_input_size(size):
    model = build_model(ModelConfig(num_classes=5, input_size=size)).eval()
    with torch.no_grad():
        output = model(torch.randn(2, 3, size, size))
    assert output.logits.shape == (2, 5)
    assert output.fused.shape[2:] == (size // 16, size // 16)
    assert output.refined.shape[2:] == (-(-size // 32), -(-size // 32))
    assert output.f_left.shape == output.f_right.shape


def test_global_pool_is_linear():
    model = build_model(ModelConfig(num_classes=2, input_size=64))
    x, y = torch.randn(2, 512, 3, 3), torch.randn(2, 512, 3, 3)
    assert torch.allclose(model.pool(2.0 * x - 0.5 * y), 2.0 * model.pool(x) - 0.5 * model.pool(y), atol=1e-6)


@pytest.mark.parametrize("sharing, shared", [("all_shared", True), ("independent", False)])
def test_structural_weight_change_reaches_half_faces_only_when_shared(sharing, shared):
    model = build_model(ModelConfig(num_classes=2, input_size=64, sharing=sharing)).eval()
    images = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        before = model(images).f_left.clone()
        first_conv = next(m for m in model.cmem.sb.modules() if isinstance(m, torch.nn.Conv2d))
        first_conv.weight.mul_(-1.0)
        after = model(images).f_left
    assert (not torch.allclose(before, after)) == shared
