from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
import torch
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset as TorchDataset, Sampler

from app.utils.config import DataConfig
from app.utils.errors import ConfigurationError, IngestionError, InputError, SamplerError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
GRAYSCALE_MODES = {"L", "I", "I;16", "F"}
MANIFEST_COLUMNS = ["path", "label", "class_name"]


@dataclass
class ImageSample:
    """Face pixels stored channel-first (C×H×W, values in [0, 1]) plus label."""

    pixels: torch.Tensor
    label: int
    path: Optional[str] = None


@dataclass
class Dataset:
    samples: List[ImageSample]
    class_names: List[str]
    split_tag: Literal["train", "val", "test"] = "train"
    skipped: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> List[int]:
        return [s.label for s in self.samples]

    def class_counts(self) -> List[int]:
        counts = [0] * len(self.class_names)
        for label in self.labels:
            counts[label] += 1
        return counts


@dataclass
class SamplerPlan:
    epoch_indices: List[int]
    policy: Literal["none", "balance"]


def decode_image(path: Path) -> torch.Tensor:
    """Decode one image file to a C×H×W tensor in [0, 1] (1 channel for gray, else 3)."""
    with Image.open(path) as img:
        img = img.convert("L") if img.mode in GRAYSCALE_MODES else img.convert("RGB")
        return TF.to_tensor(img)


def ingest_folder(root_path: str, split_tag: str = "train") -> Dataset:
    """
    Read a directory-per-class tree of pre-cropped faces.

    Classes and files are visited in lexicographic order. Gray images keep a
    single channel so that preprocess can expand them; everything else is RGB.

    Args:
        root_path (str): Directory with one subdirectory per class
        split_tag (str): train, val or test

    Returns:
        Dataset: Decoded samples in deterministic order

    Raises:
        IngestionError: If the root holds no class directories
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"Dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"No class directories found under {root}")

    samples: List[ImageSample] = []
    skipped: List[str] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        if not files:
            logger.warning(f"Class directory {class_dir} is empty")
        for path in files:
            try:
                pixels = decode_image(path)
            except (UnidentifiedImageError, OSError, ValueError) as e:
                logger.warning(f"Skipping undecodable file {path}: {str(e)}")
                skipped.append(str(path))
                continue
            samples.append(ImageSample(pixels=pixels, label=label, path=str(path)))

    logger.info(f"Ingested {len(samples)} images in {len(class_dirs)} classes from {root} ({len(skipped)} skipped)")
    return Dataset(samples=samples, class_names=[d.name for d in class_dirs], split_tag=split_tag, skipped=skipped)


def _manifest_path(sample_path: Optional[str], manifest_dir: Path) -> str:
    """Files on disk are written relative to the manifest directory when below it, else absolute."""
    if not sample_path:
        return ""
    candidate = Path(sample_path)
    if not candidate.is_file():
        return Path(sample_path).as_posix()
    resolved = candidate.resolve()
    try:
        return resolved.relative_to(manifest_dir.resolve()).as_posix()
    except ValueError:
        return resolved.as_posix()


def export_manifest(dataset: Dataset, path: Path) -> None:
    """
    Write the (path, label, class_name) manifest as CSV.

    Classes without samples get one row with an empty path so that the full
    class list survives a round trip.
    """
    path = Path(path)
    rows = [
        {"path": _manifest_path(s.path, path.parent), "label": s.label, "class_name": dataset.class_names[s.label]}
        for s in dataset.samples
    ]
    counts = dataset.class_counts()
    rows.extend(
        {"path": "", "label": label, "class_name": name}
        for label, name in enumerate(dataset.class_names)
        if counts[label] == 0
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, lineterminator="\n")


def load_manifest(path: Path, split_tag: str = "train") -> Dataset:
    """
    Rebuild a dataset from a manifest written by export_manifest.

    Relative paths are resolved against the manifest's directory.

    Raises:
        IngestionError: If the manifest is unreadable, its labels do not cover
            0..K-1, or none of its files decode
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"path": str, "class_name": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"Cannot read manifest {path}: {str(e)}")
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestionError(f"Manifest {path} lacks columns {missing}")

    names = dict(zip(frame["label"].astype(int).tolist(), frame["class_name"].tolist()))
    if sorted(names) != list(range(len(names))):
        raise IngestionError(f"Manifest {path} labels {sorted(names)} do not cover 0..{len(names) - 1}")
    class_names = [names[label] for label in range(len(names))]

    samples, skipped = [], []
    for row in frame[frame["path"] != ""].itertuples(index=False):
        file = Path(row.path)
        if not file.is_absolute():
            file = path.parent / file
        try:
            samples.append(ImageSample(pixels=decode_image(file), label=int(row.label), path=str(file)))
        except (UnidentifiedImageError, OSError, ValueError) as e:
            logger.warning(f"Skipping undecodable file {file}: {str(e)}")
            skipped.append(str(file))
    if not samples:
        raise IngestionError(f"No decodable images listed in manifest {path} ({len(skipped)} skipped)")

    logger.info(f"Loaded {len(samples)} images in {len(class_names)} classes from {path}")
    return Dataset(samples=samples, class_names=class_names, split_tag=split_tag, skipped=skipped)


def preprocess(
    pixels: torch.Tensor,
    size: int,
    grayscale_expand: bool = True,
    mean: Sequence[float] = (0.485, 0.456, 0.406),
    std: Sequence[float] = (0.229, 0.224, 0.225),
) -> torch.Tensor:
    """
    Resize to size×size and normalize per channel.

    Args:
        pixels (torch.Tensor): C×H×W image in [0, 1], C ∈ {1, 3}
        size (int): Output side length, at least 32
        grayscale_expand (bool): Replicate single-channel images to three channels
        mean, std: Normalization constants of the pretraining corpus

    Returns:
        torch.Tensor: 3×size×size normalized tensor
    """
    if size < 32:
        raise ConfigurationError(f"Preprocess size must be at least 32, got {size}")
    if pixels.dim() != 3 or pixels.shape[1] == 0 or pixels.shape[2] == 0:
        raise InputError(f"Expected a non-empty C×H×W image, got shape {tuple(pixels.shape)}")
    if pixels.shape[0] == 1:
        if not grayscale_expand:
            raise InputError("Single-channel image given with grayscale_expand disabled")
        pixels = pixels.expand(3, -1, -1)
    elif pixels.shape[0] != 3:
        raise InputError(f"Expected 1 or 3 channels, got {pixels.shape[0]}")

    pixels = pixels.float()
    if tuple(pixels.shape[1:]) != (size, size):
        pixels = TF.resize(pixels, [size, size], interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    return TF.normalize(pixels, mean=list(mean), std=list(std))


def _render_half(rng: np.random.Generator, label: int, num_classes: int, size: int) -> np.ndarray:
    """Left half (size × size/2 × 3) of a symmetric class pattern."""
    half = size // 2
    yy, xx = np.mgrid[0:size, 0:half].astype(np.float64)
    yy /= size
    xx /= size

    # class-dependent blob: vertical position and color encode the class
    cy = 0.2 + 0.6 * label / max(num_classes - 1, 1) + rng.normal(0.0, 0.02)
    cx = 0.25 + rng.normal(0.0, 0.02)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.07 ** 2))
    color = np.array([(label % 3 == 0), (label % 3 == 1), (label % 3 == 2)], dtype=np.float64) * 0.6 + 0.4

    # class-dependent stripes
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (label + 2) * yy)

    image = 0.1 * rng.random((size, half, 3))
    image += 0.6 * rng.uniform(0.8, 1.2) * blob[..., None] * color
    image += 0.2 * stripes[..., None]
    return np.clip(image, 0.0, 1.0)


def _render_quadrant(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    """Full image whose only blob sits in quadrant ``label`` (row-major)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cy = 0.25 + 0.5 * (label // 2) + rng.normal(0.0, 0.03)
    cx = 0.25 + 0.5 * (label % 2) + rng.normal(0.0, 0.03)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08 ** 2))
    image = 0.15 * rng.random((size, size, 3)) + 0.8 * blob[..., None]
    return np.clip(image, 0.0, 1.0)


def synth_generate(
    seed: int,
    n_per_class: int,
    num_classes: int,
    asymmetry: float = 0.0,
    size: int = 64,
    layout: Literal["symmetric", "quadrant"] = "symmetric",
    split_tag: str = "train",
) -> Dataset:
    """
    Generate a desk-scale face stand-in dataset.

    ``symmetric`` renders class-dependent blob/stripe layouts mirror-symmetric
    about the vertical midline, then perturbs the right half by
    ``asymmetry``·noise. ``quadrant`` places a single blob in the quadrant
    indexed by the label (at most four classes), for saliency checks.

    Raises:
        ConfigurationError: If fewer than two classes are requested or the
            parameters are out of range
    """
    if num_classes < 2:
        raise ConfigurationError(f"Synthetic data needs at least 2 classes, got {num_classes}")
    if not 0.0 <= asymmetry <= 1.0:
        raise ConfigurationError(f"asymmetry must lie in [0, 1], got {asymmetry}")
    if size % 2 or size < 32:
        raise ConfigurationError(f"Synthetic image size must be even and at least 32, got {size}")
    if layout == "quadrant" and num_classes > 4:
        raise ConfigurationError("The quadrant layout supports at most 4 classes")

    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        for index in range(n_per_class):
            if layout == "quadrant":
                image = _render_quadrant(rng, label, size)
            else:
                left = _render_half(rng, label, num_classes, size)
                right = left[:, ::-1, :].copy()
                if asymmetry > 0:
                    right = np.clip(right + asymmetry * rng.uniform(-0.5, 0.5, right.shape), 0.0, 1.0)
                image = np.concatenate([left, right], axis=1)
            pixels = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
            samples.append(ImageSample(pixels=pixels, label=label, path=f"class_{label}/{index:05d}.png"))

    logger.info(f"Generated {len(samples)} synthetic {layout} images ({num_classes} classes, seed={seed})")
    return Dataset(samples=samples, class_names=[f"class_{k}" for k in range(num_classes)], split_tag=split_tag)


def balance_sampler(
    dataset: Dataset,
    policy: Literal["none", "balance"],
    seed: int,
    epoch_size: Optional[int] = None,
) -> SamplerPlan:
    """
    Plan one epoch of sample indices.

    ``balance`` gives every class ⌊N/K⌋ or ⌈N/K⌉ slots: majority classes are
    subsampled without replacement, minority classes are repeated whole and
    topped up without replacement. ``none`` is a seeded permutation.

    Raises:
        SamplerError: On an empty dataset or an empty class under balance
    """
    if len(dataset) == 0:
        raise SamplerError("Cannot plan an epoch over an empty dataset")
    generator = torch.Generator().manual_seed(seed)
    if policy == "none":
        return SamplerPlan(epoch_indices=torch.randperm(len(dataset), generator=generator).tolist(), policy="none")
    if policy != "balance":
        raise ConfigurationError(f"Unknown sampling policy: {policy}")

    by_class: Dict[int, List[int]] = {k: [] for k in range(len(dataset.class_names))}
    for index, label in enumerate(dataset.labels):
        by_class[label].append(index)
    for label, members in by_class.items():
        if not members:
            raise SamplerError(f"Class '{dataset.class_names[label]}' has no samples to balance")

    total = epoch_size or len(dataset)
    num_classes = len(by_class)
    quotas = [total // num_classes + (1 if k < total % num_classes else 0) for k in range(num_classes)]

    chosen: List[int] = []
    for label, quota in enumerate(quotas):
        members = torch.tensor(by_class[label])
        repeats, remainder = divmod(quota, len(members))
        chosen.extend(members.repeat(repeats).tolist())
        chosen.extend(members[torch.randperm(len(members), generator=generator)[:remainder]].tolist())

    order = torch.randperm(len(chosen), generator=generator).tolist()
    return SamplerPlan(epoch_indices=[chosen[i] for i in order], policy="balance")


class PlanSampler(Sampler):
    """Yields a SamplerPlan's indices in order."""

    def __init__(self, plan: SamplerPlan):
        self.plan = plan

    def __iter__(self) -> Iterator[int]:
        return iter(self.plan.epoch_indices)

    def __len__(self) -> int:
        return len(self.plan.epoch_indices)


class FaceDataset(TorchDataset):
    """
    Model-ready view of a Dataset: preprocessed once, optionally augmented.

    Augmentation (horizontal flip, padded random crop) draws from a generator
    keyed on (seed, epoch, index) so any worker count yields the same batches.
    """

    def __init__(self, dataset: Dataset, size: int, data_config: DataConfig, seed: int = 0):
        self.dataset = dataset
        self.augment = data_config.augment
        self.seed = seed
        self.epoch = 0
        self.images = [
            preprocess(s.pixels, size, data_config.grayscale_expand, data_config.mean, data_config.std)
            for s in dataset.samples
        ]

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.images)

    def _augment(self, image: torch.Tensor, index: int) -> torch.Tensor:
        generator = torch.Generator().manual_seed(hash((self.seed, self.epoch, index)) & 0x7FFFFFFF)
        if torch.rand(1, generator=generator).item() < 0.5:
            image = torch.flip(image, dims=[-1])
        pad = max(image.shape[-1] // 16, 1)
        padded = torch.nn.functional.pad(image, (pad, pad, pad, pad), mode="reflect")
        top, left = torch.randint(0, 2 * pad + 1, (2,), generator=generator).tolist()
        return padded[:, top:top + image.shape[1], left:left + image.shape[2]]

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, int]:
        image = self.images[index]
        if self.augment:
            image = self._augment(image, index)
        return image, self.dataset.samples[index].label
