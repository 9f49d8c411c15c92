import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from app.models.cmnet import CMNet, CMNetOutput, build_model
from app.models.hfaom import LossBundle, global_loss, symmetry_loss, total_loss
from app.utils.config import RunConfig, TrainConfig
from app.utils.data import Dataset, FaceDataset, PlanSampler, balance_sampler
from app.utils.errors import ConfigurationError, InputError, LoadError, TrainingError
from app.utils.reproducibility import seed_everything

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adaptive_moment")
SCHEDULES = ("step", "halve_every", "none")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    l_sl: float
    l_gl: float
    alpha: float
    train_acc: float
    val_acc: Optional[float]
    lr: float


@dataclass
class Checkpoint:
    parameters: Dict[str, torch.Tensor]
    config: RunConfig
    epoch: int
    history: List[EpochRecord] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)


class MomentumSGD(torch.optim.Optimizer):
    """
    Heavy-ball SGD with the decay term kept out of the velocity.

    Per step: ``v ← μ·v + g`` then ``p ← p − lr·(v + wd·p)``. torch's SGD
    folds ``wd·p`` into ``g`` before the momentum update instead.
    """

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "velocity" not in state:
                    state["velocity"] = torch.zeros_like(p)
                velocity = state["velocity"]
                velocity.mul_(group["momentum"]).add_(p.grad)
                p.add_(velocity + group["weight_decay"] * p, alpha=-group["lr"])
        return loss


def configure_optimizer(
    parameters: Iterable[torch.nn.Parameter], config: TrainConfig
) -> Tuple[torch.optim.Optimizer, Optional[torch.optim.lr_scheduler.LRScheduler]]:
    """
    Build the optimizer and per-epoch learning-rate schedule.

    Args:
        parameters: Parameters to optimize
        config (TrainConfig): Optimizer tag, lr, momentum, decay and schedule

    Returns:
        Tuple: (optimizer, scheduler or None); the scheduler steps once per epoch

    Raises:
        ConfigurationError: On an unknown optimizer or schedule tag
    """
    if config.optimizer == "sgd_momentum":
        optimizer = MomentumSGD(parameters, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    elif config.optimizer == "adaptive_moment":
        if config.weight_decay:
            logger.warning(f"adaptive_moment runs without weight decay; ignoring weight_decay={config.weight_decay}")
        optimizer = torch.optim.Adam(parameters, lr=config.lr)
    else:
        raise ConfigurationError(f"Unknown optimizer '{config.optimizer}', expected one of {OPTIMIZERS}")

    if config.schedule == "step":
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.step_every, gamma=config.step_factor)
    elif config.schedule == "halve_every":
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.halve_every, gamma=0.5)
    elif config.schedule == "none":
        scheduler = None
    else:
        raise ConfigurationError(f"Unknown schedule '{config.schedule}', expected one of {SCHEDULES}")
    return optimizer, scheduler


def compute_losses(output: CMNetOutput, labels: torch.Tensor, model: CMNet) -> LossBundle:
    """
    HFAOM compound loss for one batch.

    Models without the symmetry term (ablation rows a–c) train on the global
    loss alone, which is the alpha = 1 boundary of the combination.
    """
    l_gl = global_loss(output.logits, labels)
    if model.config.use_hfaom and output.f_left is not None:
        return total_loss(symmetry_loss(output.f_left, output.f_right), l_gl, model.config.alpha)
    return total_loss(torch.zeros_like(l_gl), l_gl, 1.0)


def make_loader(dataset: Dataset, run_config: RunConfig, shuffle_seed: Optional[int], batch_size: int) -> Tuple[DataLoader, FaceDataset]:
    """Loader over preprocessed faces; shuffle_seed=None keeps dataset order and skips augmentation."""
    data_config = run_config.data.model_copy(update={"augment": run_config.data.augment and shuffle_seed is not None})
    face_data = FaceDataset(dataset, run_config.model.input_size, data_config, seed=run_config.train.seed)
    sampler = None
    if shuffle_seed is not None:
        sampler = PlanSampler(balance_sampler(dataset, run_config.data.sampling, shuffle_seed))
    loader = DataLoader(
        face_data,
        batch_size=batch_size,
        sampler=sampler,
        shuffle=False,
        num_workers=run_config.train.num_workers,
    )
    return loader, face_data


@torch.no_grad()
def predict(model: CMNet, loader: DataLoader, device: str = "cpu") -> Tuple[List[int], List[int]]:
    """Argmax predictions in loader order; returns (true, predicted)."""
    model.eval()
    true, pred = [], []
    for images, labels in loader:
        logits = model(images.to(device)).logits
        pred.extend(logits.argmax(dim=1).tolist())
        true.extend(labels.tolist())
    return true, pred


def _accuracy(true: List[int], pred: List[int]) -> float:
    return sum(int(t == p) for t, p in zip(true, pred)) / max(len(true), 1)


def train(
    model: CMNet,
    dataset: Dataset,
    config: RunConfig,
    val_dataset: Optional[Dataset] = None,
    device: str = "cpu",
) -> Checkpoint:
    """
    Optimize a model on a dataset and return the final checkpoint.

    Each step runs the full forward, the compound loss, one backward pass
    through both the fused path and the half-face taps, and one optimizer
    step. The sampling plan of epoch e is seeded with seed + e, so a fixed
    seed reproduces the run.

    Raises:
        TrainingError: On a non-finite loss, with batch index and components
    """
    train_config = config.train
    seed_everything(train_config.seed)
    model.to(device)
    # bfloat16 autocast needs no gradient scaler
    device_type = torch.device(device).type
    optimizer, scheduler = configure_optimizer(model.parameters(), train_config)
    face_data = FaceDataset(dataset, config.model.input_size, config.data, seed=train_config.seed)

    val_loader = None
    if val_dataset is not None and len(val_dataset):
        val_loader, _ = make_loader(val_dataset, config, None, config.evaluation.batch_size)

    history: List[EpochRecord] = []
    for epoch in range(1, train_config.epochs + 1):
        plan = balance_sampler(dataset, config.data.sampling, train_config.seed + epoch)
        face_data.set_epoch(epoch)
        loader = DataLoader(
            face_data,
            batch_size=train_config.batch_size,
            sampler=PlanSampler(plan),
            num_workers=train_config.num_workers,
        )
        lr = optimizer.param_groups[0]["lr"]

        model.train()
        seen, correct = 0, 0
        sums = {"total": 0.0, "l_sl": 0.0, "l_gl": 0.0}
        alpha = 1.0
        for batch_index, (images, labels) in enumerate(tqdm(loader, desc=f"Epoch {epoch}/{train_config.epochs}", leave=False)):
            images, labels = images.to(device), labels.to(device)
            with torch.autocast(device_type=device_type, dtype=torch.bfloat16, enabled=train_config.amp):
                output = model(images)
                try:
                    bundle = compute_losses(output, labels, model)
                except InputError as e:
                    raise TrainingError(f"Loss computation failed at batch {batch_index}: {str(e)}", batch_index)

            components = {
                "total": float(bundle.total.detach()),
                "l_sl": float(bundle.l_sl.detach()),
                "l_gl": float(bundle.l_gl.detach()),
            }
            if not torch.isfinite(bundle.total):
                raise TrainingError(
                    f"Non-finite loss at epoch {epoch}, batch {batch_index}: {components}",
                    batch_index,
                    components,
                )

            optimizer.zero_grad()
            bundle.total.backward()
            optimizer.step()

            batch = labels.shape[0]
            seen += batch
            correct += int((output.logits.argmax(dim=1) == labels).sum())
            for key, value in components.items():
                sums[key] += value * batch
            alpha = bundle.alpha

        if scheduler is not None:
            scheduler.step()

        val_acc = None
        if val_loader is not None:
            frozen = copy.deepcopy(model)
            true, pred = predict(frozen, val_loader, device)
            val_acc = _accuracy(true, pred)

        record = EpochRecord(
            epoch=epoch,
            train_loss=sums["total"] / seen,
            l_sl=sums["l_sl"] / seen,
            l_gl=sums["l_gl"] / seen,
            alpha=alpha,
            train_acc=correct / seen,
            val_acc=val_acc,
            lr=lr,
        )
        history.append(record)
        logger.info(
            f"Epoch {epoch}: loss={record.train_loss:.4f} l_sl={record.l_sl:.4f} "
            f"l_gl={record.l_gl:.4f} train_acc={record.train_acc:.4f} val_acc={val_acc}"
        )

    return Checkpoint(
        parameters={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        config=config.model_copy(update={"model": model.config}),
        epoch=train_config.epochs,
        history=history,
        class_names=list(dataset.class_names),
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write a checkpoint as a named-tensor container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "parameters": checkpoint.parameters,
            "config": checkpoint.config.model_dump(mode="json"),
            "epoch": checkpoint.epoch,
            "history": [asdict(r) for r in checkpoint.history],
            "class_names": checkpoint.class_names,
        },
        path,
    )
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        LoadError: If the file is unreadable or incomplete
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return Checkpoint(
            parameters=payload["parameters"],
            config=RunConfig.model_validate(payload["config"]),
            epoch=int(payload["epoch"]),
            history=[EpochRecord(**r) for r in payload["history"]],
            class_names=list(payload.get("class_names", [])),
        )
    except Exception as e:
        raise LoadError(f"Failed to load checkpoint {path}: {str(e)}")


def model_from_checkpoint(checkpoint: Checkpoint) -> CMNet:
    """Rebuild the model a checkpoint was trained with and load its parameters."""
    model = build_model(checkpoint.config.model, seed=checkpoint.config.train.seed)
    model.load_state_dict(checkpoint.parameters, strict=True)
    model.eval()
    return model


def fine_tune(
    checkpoint: Checkpoint,
    dataset: Dataset,
    config: RunConfig,
    val_dataset: Optional[Dataset] = None,
    device: str = "cpu",
) -> Checkpoint:
    """
    Continue training a checkpoint on another dataset.

    The classifier head is replaced when the class counts differ.
    """
    model = model_from_checkpoint(checkpoint)
    num_classes = len(dataset.class_names)
    if model.num_classes != num_classes:
        model.replace_head(num_classes)
    return train(model, dataset, config, val_dataset=val_dataset, device=device)


def export_history(history: List[EpochRecord], path: Path) -> None:
    """Write per-epoch history as CSV for plotting."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([asdict(r) for r in history]).to_csv(path, index=False, lineterminator="\n")
