import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix

from app.models.cmnet import ABLATION_LABELS, CMNet, apply_ablation_row, build_model
from app.services.engine import Checkpoint, make_loader, model_from_checkpoint, predict, train
from app.utils.config import ModelConfig, RunConfig
from app.utils.data import Dataset, ImageSample
from app.utils.errors import EvaluationError, InputError, MappingError

logger = logging.getLogger(__name__)

REFERENCE_PARAMETERS_M = 11.78
REFERENCE_FLOPS_G = {128: 0.36, 224: 1.12, 512: 5.83}


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: List[str]

    @property
    def normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape, dtype=np.float64), where=totals > 0)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def to_frame(self, normalized: bool = False) -> pd.DataFrame:
        values = self.normalized if normalized else self.counts
        return pd.DataFrame(values, index=self.class_names, columns=self.class_names)


@dataclass
class ComplexityReport:
    input_size: int
    parameter_count: int
    macs: int
    flops: int
    latency_ms: Optional[float] = None
    latency_batch: int = 32
    breakdown: Dict[str, int] = field(default_factory=dict)

    def as_row(self) -> Dict[str, Union[int, float, None]]:
        reference = REFERENCE_FLOPS_G.get(self.input_size)
        return {
            "input_size": self.input_size,
            "parameters": self.parameter_count,
            "parameters_m": round(self.parameter_count / 1e6, 4),
            "macs": self.macs,
            "flops": self.flops,
            "flops_g": round(self.flops / 1e9, 4),
            "reference_flops_g": reference,
            "flops_ratio_to_reference": round(self.flops / 1e9 / reference, 4) if reference else None,
        }


def confusion_from_predictions(true: Sequence[int], pred: Sequence[int], class_names: List[str]) -> ConfusionMatrix:
    """Tally a confusion matrix over every class index, including classes absent from both lists."""
    k = len(class_names)
    if len(true) == 0:
        return ConfusionMatrix(counts=np.zeros((k, k), dtype=np.int64), class_names=list(class_names))
    counts = confusion_matrix(list(true), list(pred), labels=list(range(k))).astype(np.int64)
    return ConfusionMatrix(counts=counts, class_names=list(class_names))


def evaluate(
    checkpoint: Union[Checkpoint, CMNet],
    dataset: Dataset,
    config: Optional[RunConfig] = None,
    device: str = "cpu",
) -> Tuple[float, ConfusionMatrix]:
    """
    Accuracy and confusion matrix of a checkpoint (or live model) on a dataset.

    Raises:
        EvaluationError: If the head and the dataset disagree on the class count
    """
    if isinstance(checkpoint, Checkpoint):
        model = model_from_checkpoint(checkpoint)
        # preprocessing follows the architecture the checkpoint was trained with
        config = (config or checkpoint.config).model_copy(update={"model": checkpoint.config.model})
    else:
        model = checkpoint
        config = config or RunConfig(model=model.config)
    if model.num_classes != len(dataset.class_names):
        raise EvaluationError(
            f"Model predicts {model.num_classes} classes but dataset has {len(dataset.class_names)}"
        )

    loader, _ = make_loader(dataset, config, None, config.evaluation.batch_size)
    true, pred = predict(model.to(device), loader, device)
    matrix = confusion_from_predictions(true, pred, dataset.class_names)
    logger.info(f"Evaluated {len(true)} samples: accuracy={matrix.accuracy:.4f}")
    return matrix.accuracy, matrix


def cross_evaluate(
    checkpoint: Checkpoint,
    foreign: Dataset,
    label_map: Dict[str, int],
    device: str = "cpu",
) -> Tuple[float, ConfusionMatrix]:
    """
    Evaluate on a dataset from another corpus after relabeling.

    Args:
        checkpoint (Checkpoint): Trained model
        foreign (Dataset): Dataset with its own class names
        label_map (Dict[str, int]): Foreign class name → model class index

    Raises:
        MappingError: If a foreign class is unmapped, out of range or the map is not injective
    """
    num_classes = checkpoint.config.model.num_classes
    present = sorted({foreign.class_names[label] for label in foreign.labels})
    unmapped = [name for name in present if name not in label_map]
    if unmapped:
        raise MappingError(f"Foreign labels without a model class: {unmapped}")
    targets = [label_map[name] for name in present]
    if len(set(targets)) != len(targets):
        raise MappingError(f"Label map is not injective over {present}")
    if any(not 0 <= t < num_classes for t in targets):
        raise MappingError(f"Label map targets outside [0, {num_classes}): {targets}")

    class_names = checkpoint.class_names or [f"class_{k}" for k in range(num_classes)]
    remapped = Dataset(
        samples=[
            ImageSample(pixels=s.pixels, label=label_map[foreign.class_names[s.label]], path=s.path)
            for s in foreign.samples
        ],
        class_names=class_names,
        split_tag="test",
    )
    config = checkpoint.config.model_copy(
        update={"data": checkpoint.config.data.model_copy(update={"grayscale_expand": True, "augment": False})}
    )
    return evaluate(checkpoint, remapped, config=config, device=device)


def ablation_run(
    base_config: RunConfig,
    rows: Sequence[str],
    dataset: Dataset,
    val_dataset: Optional[Dataset] = None,
    device: str = "cpu",
) -> pd.DataFrame:
    """
    Train and evaluate each ablation row on the given dataset.

    Returns:
        pd.DataFrame: One row per tag with its label, parameter count and accuracy
    """
    records = []
    eval_data = val_dataset if val_dataset is not None else dataset
    for row in rows:
        model_config = apply_ablation_row(base_config.model, row)
        run_config = base_config.model_copy(
            update={
                "model": model_config,
                "train": base_config.train.model_copy(update={"epochs": base_config.evaluation.ablation_epochs}),
            }
        )
        model = build_model(model_config, seed=run_config.train.seed)
        parameters = count_parameters(model)
        checkpoint = train(model, dataset, run_config, device=device)
        accuracy, _ = evaluate(checkpoint, eval_data, device=device)
        records.append({"row": row, "setting": ABLATION_LABELS[row], "parameters": parameters, "accuracy": accuracy})
        logger.info(f"Ablation row {row} ({ABLATION_LABELS[row]}): accuracy={accuracy:.4f}")
    return pd.DataFrame(records)


def alpha_sweep(
    base_config: RunConfig,
    dataset: Dataset,
    val_dataset: Optional[Dataset] = None,
    alphas: Optional[Sequence[float]] = None,
    device: str = "cpu",
) -> pd.DataFrame:
    """Train one model per alpha and report its accuracy."""
    alphas = list(alphas if alphas is not None else base_config.evaluation.alpha_grid)
    eval_data = val_dataset if val_dataset is not None else dataset
    records = []
    for alpha in alphas:
        run_config = base_config.model_copy(
            update={
                "model": base_config.model.model_copy(update={"alpha": alpha}),
                "train": base_config.train.model_copy(update={"epochs": base_config.evaluation.ablation_epochs}),
            }
        )
        model = build_model(run_config.model, seed=run_config.train.seed)
        checkpoint = train(model, dataset, run_config, device=device)
        accuracy, _ = evaluate(checkpoint, eval_data, device=device)
        records.append({"alpha": alpha, "accuracy": accuracy, "final_l_sl": checkpoint.history[-1].l_sl})
        logger.info(f"alpha={alpha}: accuracy={accuracy:.4f}")
    return pd.DataFrame(records)


def count_parameters(model: nn.Module) -> int:
    """Distinct trainable parameters; shared branches count once."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_flops(model: nn.Module, example: torch.Tensor) -> Tuple[int, Dict[str, int]]:
    """
    Multiply-accumulates of one forward pass, by layer-type closed forms.

    Conv: K_h·K_w·(C_in/groups)·C_out·H_out·W_out per sample; affine: in·out
    per row. Every call is counted, so a shared backbone counts once per branch.

    Returns:
        Tuple[int, Dict[str, int]]: (total MACs, MACs per layer type)
    """
    breakdown = {"conv": 0, "linear": 0}

    def conv_hook(module: nn.Conv2d, inputs, output):
        kh, kw = module.kernel_size
        per_position = kh * kw * (module.in_channels // module.groups) * module.out_channels
        breakdown["conv"] += per_position * output.shape[0] * output.shape[2] * output.shape[3]

    def linear_hook(module: nn.Linear, inputs, output):
        rows = output.numel() // module.out_features
        breakdown["linear"] += module.in_features * module.out_features * rows

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    try:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(example)
        model.train(was_training)
    finally:
        for handle in handles:
            handle.remove()
    return sum(breakdown.values()), breakdown


def measure_latency(model: nn.Module, example: torch.Tensor, runs: int, warmup: int) -> Optional[float]:
    """Median wall time in milliseconds over ``runs`` timed batches."""
    if runs <= 0:
        return None
    model.eval()
    timings = []
    with torch.no_grad():
        for _ in range(warmup):
            model(example)
        for _ in range(runs):
            start = time.perf_counter()
            model(example)
            timings.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(timings)


def profile(
    config: ModelConfig,
    input_size: int,
    latency_batch: int = 32,
    latency_runs: int = 5,
    latency_warmup: int = 2,
    device: str = "cpu",
) -> ComplexityReport:
    """
    Parameter count, FLOPs (2 × MACs) and latency at one input size.

    Latency is the median of ``latency_runs`` batches of ``latency_batch``
    images after ``latency_warmup`` warm-up batches; pass latency_runs=0 to skip.
    """
    model = build_model(config.model_copy(update={"input_size": input_size})).to(device)
    macs, breakdown = count_flops(model, torch.zeros(1, 3, input_size, input_size, device=device))
    latency = None
    if latency_runs > 0:
        latency = measure_latency(
            model, torch.zeros(latency_batch, 3, input_size, input_size, device=device), latency_runs, latency_warmup
        )
    report = ComplexityReport(
        input_size=input_size,
        parameter_count=count_parameters(model),
        macs=macs,
        flops=2 * macs,
        latency_ms=latency,
        latency_batch=latency_batch,
        breakdown=breakdown,
    )
    logger.info(
        f"Profile @{input_size}: {report.parameter_count / 1e6:.2f} M parameters, "
        f"{report.flops / 1e9:.2f} GFLOPs, latency={latency}"
    )
    return report


def saliency_map(model: CMNet, image: torch.Tensor, target_class: int) -> torch.Tensor:
    """
    Grad-CAM++ heat map on the refined features.

    Uses the closed form for an exponential class score: with g = ∂logit/∂A,
    the pixel weights are g² / (2g² + ΣA·g³) and the channel weights sum
    those times relu(g). The map is rectified, upsampled to the input size
    and min-max normalized.

    Args:
        model (CMNet): Trained model
        image (torch.Tensor): Preprocessed 3×H×W image
        target_class (int): Class whose evidence is visualized

    Returns:
        torch.Tensor: H×W map in [0, 1]; all zeros when the gradient field vanishes

    Raises:
        InputError: On a malformed image or an invalid class index
    """
    if image.dim() != 3 or image.shape[0] != 3:
        raise InputError(f"Expected a 3×H×W image, got {tuple(image.shape)}")
    if not 0 <= target_class < model.num_classes:
        raise InputError(f"target_class {target_class} outside [0, {model.num_classes})")

    model.eval()
    height, width = image.shape[1:]
    with torch.enable_grad():
        output = model(image.unsqueeze(0))
        activations = output.refined
        score = output.logits[0, target_class]
        grads = torch.autograd.grad(score, activations)[0]

    activations = activations.detach()
    grads_2 = grads ** 2
    grads_3 = grads ** 3
    denom = 2 * grads_2 + activations.sum(dim=(2, 3), keepdim=True) * grads_3
    denom = torch.where(denom != 0, denom, torch.ones_like(denom))
    alphas = grads_2 / denom
    weights = (alphas * F.relu(grads)).sum(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activations).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(height, width), mode="bilinear", align_corners=False)[0, 0]

    low, high = cam.min(), cam.max()
    if not torch.isfinite(high) or high - low <= 0:
        logger.warning(f"Degenerate gradient field for class {target_class}; returning a flat map")
        return torch.zeros(height, width, dtype=image.dtype)
    return (cam - low) / (high - low)


def quadrant_mass(heatmap: torch.Tensor, top_fraction: float = 0.1) -> List[float]:
    """Share of the top-``top_fraction`` pixels falling in each quadrant (row-major)."""
    height, width = heatmap.shape
    k = max(int(heatmap.numel() * top_fraction), 1)
    threshold = heatmap.flatten().topk(k).values.min()
    mask = heatmap >= threshold
    h2, w2 = height // 2, width // 2
    quadrants = [mask[:h2, :w2], mask[:h2, w2:], mask[h2:, :w2], mask[h2:, w2:]]
    total = float(mask.sum())
    return [float(q.sum()) / total for q in quadrants]


@torch.no_grad()
def occlusion_quadrant_scores(model: CMNet, image: torch.Tensor, target_class: int, fill: float = 0.0) -> List[float]:
    """Logit drop of the target class when each quadrant is masked (row-major)."""
    model.eval()
    height, width = image.shape[1:]
    h2, w2 = height // 2, width // 2
    base = model(image.unsqueeze(0)).logits[0, target_class]
    boxes = [(0, h2, 0, w2), (0, h2, w2, width), (h2, height, 0, w2), (h2, height, w2, width)]
    drops = []
    for top, bottom, left, right in boxes:
        occluded = image.clone()
        occluded[:, top:bottom, left:right] = fill
        drops.append(float(base - model(occluded.unsqueeze(0)).logits[0, target_class]))
    return drops
