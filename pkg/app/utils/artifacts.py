import itertools
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

logger = logging.getLogger(__name__)


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a result table as CSV with a fixed float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.6f")
    logger.info(f"Table written to {path}")
    return path


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def render_confusion_matrix(
    normalized: np.ndarray, class_names: List[str], title: str, path: Union[str, Path]
) -> Path:
    """Render a row-normalized confusion matrix as a PNG heat map."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(class_names), 1.0 + 0.8 * len(class_names)))
    ax.imshow(normalized, interpolation="nearest", cmap=plt.get_cmap("Blues"), vmin=0.0, vmax=1.0)
    thresh = 0.5
    for i, j in itertools.product(range(normalized.shape[0]), range(normalized.shape[1])):
        ax.text(
            j, i, f"{normalized[i, j]:0.2f}",
            horizontalalignment="center",
            color="white" if normalized[i, j] > thresh else "black",
        )
    ticks = np.arange(len(class_names))
    ax.set_xticks(ticks)
    ax.set_xticklabels(class_names, rotation=90)
    ax.set_yticks(ticks)
    ax.set_yticklabels(class_names)
    ax.set_ylabel("Target")
    ax.set_xlabel("Prediction")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """C×H×W float tensor in [0, 1] → H×W×C (or H×W) uint8 array."""
    array = pixels.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).numpy()
    if array.ndim == 3:
        array = array.transpose(1, 2, 0)
        if array.shape[2] == 1:
            array = array[..., 0]
    return array


def save_image(pixels: torch.Tensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path)
    return path


def save_heatmap(heatmap: torch.Tensor, image: torch.Tensor, path: Union[str, Path]) -> Path:
    """Overlay a [0, 1] heat map on its source image with the jet colormap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    colored = plt.get_cmap("jet")(heatmap.detach().cpu().numpy())[..., :3]
    base = to_uint8(image).astype(np.float64) / 255.0
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    overlay = np.clip(0.5 * base + 0.5 * colored, 0.0, 1.0)
    Image.fromarray((overlay * 255.0).round().astype(np.uint8)).save(path)
    return path
