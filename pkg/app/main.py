import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
import yaml

from app.models.backbones import load_pretrained, load_weight_table
from app.models.cmem import split_face
from app.models.cmnet import build_model, parse_rows
from app.services.engine import (
    export_history,
    fine_tune,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from app.services.evaluation import (
    ConfusionMatrix,
    ablation_run,
    alpha_sweep,
    cross_evaluate,
    evaluate,
    occlusion_quadrant_scores,
    profile,
    quadrant_mass,
    saliency_map,
)
from app.utils.artifacts import render_confusion_matrix, save_heatmap, save_image, write_json, write_table
from app.utils.config import DEVICE, LOG_LEVEL, OUTPUT_ROOT, WEIGHTS_PATH, RunConfig, dump_config, load_config
from app.utils.data import (
    Dataset,
    ImageSample,
    decode_image,
    export_manifest,
    ingest_folder,
    load_manifest,
    preprocess,
    synth_generate,
)
from app.utils.errors import ConfigurationError, TrainingError, UsageError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
# run.log carries no timestamps
FILE_LOG_FORMAT = "%(levelname)s - %(name)s - %(message)s"
SUBCOMMANDS = (
    "train",
    "evaluate",
    "cross-evaluate",
    "ablate",
    "profile",
    "saliency",
    "synth-data",
    "split-preview",
    "alpha-sweep",
)

# subcommand flags that are shorthands for config keys
FLAG_OVERRIDES: Dict[str, Dict[str, str]] = {
    "synth-data": {
        "seed": "train.seed",
        "classes": "model.num_classes",
        "n": "data.n_per_class",
        "asymmetry": "data.asymmetry",
        "size": "model.input_size",
        "layout": "data.layout",
    },
    "split-preview": {"mirror_right": "model.mirror_right"},
}


def load_split(config: RunConfig, split: str) -> Dataset:
    """
    Dataset for one split: the configured directory, else synthetic faces.

    A root ending in .csv is read as a manifest. Synthetic splits draw from
    seed, seed + 1 and seed + 2 for train, val and test so that they never
    share images.
    """
    roots = {"train": config.data.root, "val": config.data.val_root, "test": config.data.test_root}
    offsets = {"train": 0, "val": 1, "test": 2}
    if roots[split] and roots[split].lower().endswith(".csv"):
        return load_manifest(roots[split], split_tag=split)
    if roots[split]:
        return ingest_folder(roots[split], split_tag=split)
    if not config.data.synthetic:
        raise ConfigurationError(f"No data.{'root' if split == 'train' else split + '_root'} given and data.synthetic is off")
    return synth_generate(
        seed=config.train.seed + offsets[split],
        n_per_class=config.data.n_per_class if split == "train" else config.data.val_n_per_class,
        num_classes=config.model.num_classes,
        asymmetry=config.data.asymmetry,
        size=config.model.input_size,
        layout=config.data.layout,
        split_tag=split,
    )


def _write_confusion(matrix: ConfusionMatrix, accuracy: float, output_dir: Path, title: str) -> None:
    write_table(matrix.to_frame().reset_index(names="true"), output_dir / "confusion_matrix.csv")
    write_table(matrix.to_frame(normalized=True).reset_index(names="true"), output_dir / "confusion_normalized.csv")
    render_confusion_matrix(matrix.normalized, matrix.class_names, title, output_dir / "confusion_matrix.png")
    write_json({"accuracy": round(accuracy, 6), "samples": int(matrix.counts.sum())}, output_dir / "metrics.json")


def cmd_train(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    dataset = load_split(config, "train")
    val_dataset = load_split(config, "val")
    export_manifest(dataset, output_dir / "manifest.csv")

    if args.checkpoint:
        checkpoint = fine_tune(load_checkpoint(args.checkpoint), dataset, config, val_dataset=val_dataset, device=DEVICE)
    else:
        model = build_model(config.model, seed=config.train.seed)
        weights = args.weights or WEIGHTS_PATH
        if weights:
            load_pretrained(model, load_weight_table(weights))
        checkpoint = train(model, dataset, config, val_dataset=val_dataset, device=DEVICE)

    save_checkpoint(checkpoint, output_dir / "checkpoint.pt")
    export_history(checkpoint.history, output_dir / "history.csv")
    last = checkpoint.history[-1]
    write_json(
        {
            "epochs": checkpoint.epoch,
            "train_loss": round(last.train_loss, 6),
            "l_sl": round(last.l_sl, 6),
            "l_gl": round(last.l_gl, 6),
            "train_acc": round(last.train_acc, 6),
            "val_acc": None if last.val_acc is None else round(last.val_acc, 6),
        },
        output_dir / "metrics.json",
    )


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_split(config, "test")
    accuracy, matrix = evaluate(checkpoint, dataset, config=config, device=DEVICE)
    _write_confusion(matrix, accuracy, output_dir, "Confusion Matrix")


def cmd_cross_evaluate(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    foreign = ingest_folder(args.foreign_root, split_tag="test") if args.foreign_root else load_split(config, "test")
    label_map = dict(config.evaluation.label_map)
    if args.label_map:
        with open(args.label_map, "r", encoding="utf-8") as f:
            label_map = yaml.safe_load(f) or {}
    if not label_map:
        label_map = {name: index for index, name in enumerate(foreign.class_names)}
        logger.info("No label map given; mapping foreign classes by position")
    accuracy, matrix = cross_evaluate(checkpoint, foreign, label_map, device=DEVICE)
    _write_confusion(matrix, accuracy, output_dir, "Cross-evaluation Confusion Matrix")


def cmd_ablate(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    rows = parse_rows(args.rows)
    table = ablation_run(config, rows, load_split(config, "train"), load_split(config, "val"), device=DEVICE)
    write_table(table, output_dir / "ablation.csv")


def cmd_alpha_sweep(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    table = alpha_sweep(config, load_split(config, "train"), load_split(config, "val"), device=DEVICE)
    write_table(table, output_dir / "alpha_sweep.csv")


def cmd_profile(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    sizes = args.sizes or config.evaluation.profile_sizes
    rows, timings = [], []
    for size in sizes:
        report = profile(
            config.model,
            size,
            latency_batch=config.evaluation.latency_batch,
            latency_runs=config.evaluation.latency_runs,
            latency_warmup=config.evaluation.latency_warmup,
            device=DEVICE,
        )
        row = report.as_row()
        row.update({f"{kind}_macs": macs for kind, macs in sorted(report.breakdown.items())})
        rows.append(row)
        timings.append({"input_size": size, "batch": report.latency_batch, "latency_ms": report.latency_ms})
    write_table(pd.DataFrame(rows), output_dir / "profile.csv")
    # wall-clock numbers stay out of the deterministic metric file
    write_table(pd.DataFrame(timings), output_dir / "latency.csv")


def cmd_saliency(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(checkpoint)
    data = checkpoint.config.data
    size = checkpoint.config.model.input_size

    if args.image:
        pixels, label = decode_image(Path(args.image)), None
    else:
        sample = load_split(config, "test").samples[args.index]
        pixels, label = sample.pixels, sample.label
    target = args.target_class if args.target_class is not None else label
    if target is None:
        raise ConfigurationError("--target-class is required with --image")

    image = preprocess(pixels, size, data.grayscale_expand, data.mean, data.std)
    heatmap = saliency_map(model, image, target)
    display = preprocess(pixels, size, True, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    save_image(heatmap.unsqueeze(0), output_dir / "heatmap.png")
    save_heatmap(heatmap, display, output_dir / "overlay.png")
    write_json(
        {
            "target_class": target,
            "quadrant_mass": [round(m, 6) for m in quadrant_mass(heatmap)],
            "occlusion_drop": [round(d, 6) for d in occlusion_quadrant_scores(model, image, target)],
        },
        output_dir / "saliency.json",
    )


def cmd_synth_data(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    dataset = synth_generate(
        seed=config.train.seed,
        n_per_class=config.data.n_per_class,
        num_classes=config.model.num_classes,
        asymmetry=config.data.asymmetry,
        size=config.model.input_size,
        layout=config.data.layout,
    )
    written = []
    for sample in dataset.samples:
        relative = Path("images") / sample.path
        save_image(sample.pixels, output_dir / relative)
        written.append(ImageSample(pixels=sample.pixels, label=sample.label, path=relative.as_posix()))
    export_manifest(
        Dataset(samples=written, class_names=dataset.class_names, split_tag=dataset.split_tag),
        output_dir / "manifest.csv",
    )


def cmd_split_preview(args: argparse.Namespace, config: RunConfig, output_dir: Path) -> None:
    pixels = decode_image(Path(args.image))
    left, right = split_face(pixels, mirror_right=config.model.mirror_right)
    save_image(left, output_dir / "left.png")
    save_image(right, output_dir / "right.png")
    write_json(
        {"height": int(pixels.shape[1]), "left_width": int(left.shape[-1]), "right_width": int(right.shape[-1])},
        output_dir / "split.json",
    )


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, Path], None]] = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "cross-evaluate": cmd_cross_evaluate,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
    "saliency": cmd_saliency,
    "synth-data": cmd_synth_data,
    "split-preview": cmd_split_preview,
    "alpha-sweep": cmd_alpha_sweep,
}


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting on a bad command line."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = CommandParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable)")
    common.add_argument("--output-dir", help=f"Artifact directory (default: {OUTPUT_ROOT}/<subcommand>)")

    parser = CommandParser(prog="python -m app.main", description="Cross-modal facial expression recognition")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--checkpoint", help="Fine-tune from this checkpoint")
    p.add_argument("--weights", help="Pretrained reference-network weights")

    p = sub.add_parser("evaluate", parents=[common], help="Accuracy and confusion matrix")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("cross-evaluate", parents=[common], help="Evaluate on a foreign dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--foreign-root", help="Directory-per-class tree of the foreign dataset")
    p.add_argument("--label-map", help="YAML mapping foreign class name → model class index")

    p = sub.add_parser("ablate", parents=[common], help="Train and evaluate ablation rows")
    p.add_argument("--rows", default="a..i", help="Row tags, e.g. a..i or a,c,h")

    sub.add_parser("alpha-sweep", parents=[common], help="Accuracy over the alpha grid")

    p = sub.add_parser("profile", parents=[common], help="Parameters, FLOPs and latency")
    p.add_argument("--sizes", type=int, nargs="+", help="Input sizes (default: evaluation.profile_sizes)")

    p = sub.add_parser("saliency", parents=[common], help="Grad-CAM++ heat map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="Image file (default: a test-split sample)")
    p.add_argument("--index", type=int, default=0, help="Test-split sample index")
    p.add_argument("--target-class", type=int)

    p = sub.add_parser("synth-data", parents=[common], help="Write a synthetic face dataset")
    p.add_argument("--seed", type=int, help="Shorthand for --set train.seed")
    p.add_argument("--classes", type=int, help="Shorthand for --set model.num_classes")
    p.add_argument("--n", type=int, help="Images per class; shorthand for --set data.n_per_class")
    p.add_argument("--asymmetry", type=float, help="Shorthand for --set data.asymmetry")
    p.add_argument("--size", type=int, help="Shorthand for --set model.input_size")
    p.add_argument("--layout", choices=["symmetric", "quadrant"], help="Shorthand for --set data.layout")

    p = sub.add_parser("split-preview", parents=[common], help="Write the two half-face images")
    p.add_argument("--image", required=True)
    p.add_argument("--mirror-right", action="store_true", default=None, help="Shorthand for --set model.mirror_right=true")
    return parser


def _error_record(exc: BaseException) -> Dict:
    detail = "Invalid configuration" if isinstance(exc, ConfigurationError) else "An unexpected error occurred"
    if isinstance(exc, UsageError):
        detail = "Invalid command line"
    if isinstance(exc, TrainingError):
        detail = {"batch_index": exc.batch_index, "components": exc.components}
    return {"error": str(exc), "type": type(exc).__name__, "detail": detail}


def _attach_file_log(output_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(output_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(FILE_LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Turn the subcommand shorthand flags that were given into ``section.key=value`` overrides."""
    overrides = []
    for flag, key in FLAG_OVERRIDES.get(args.subcommand, {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return overrides


def _usage_output_dir(argv: Optional[Sequence[str]]) -> Path:
    """Output directory named on a command line that failed to parse, else OUTPUT_ROOT/usage."""
    recover = CommandParser(add_help=False)
    recover.add_argument("--output-dir")
    try:
        known, _ = recover.parse_known_args(argv)
    except UsageError:
        known = None
    if known is not None and known.output_dir:
        return Path(known.output_dir)
    return Path(OUTPUT_ROOT) / "usage"


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse a command line, dispatch the subcommand and write its artifacts.

    Returns:
        int: 0 on success, 1 on a runtime failure, 2 on a usage or configuration error
    """
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help
        return 0 if e.code in (0, None) else 2
    except UsageError as e:
        logger.error(f"Usage error: {str(e)}")
        write_json(_error_record(e), _usage_output_dir(argv) / "error.json")
        return 2

    output_dir = Path(args.output_dir or Path(OUTPUT_ROOT) / args.subcommand)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "error.json").unlink(missing_ok=True)
    handler = _attach_file_log(output_dir)
    try:
        config = load_config(args.config, list(args.overrides) + flag_overrides(args))
        dump_config(config, output_dir / "effective_config.yaml")
        logger.info(f"Running {args.subcommand} → {output_dir}")
        COMMANDS[args.subcommand](args, config, output_dir)
        logger.info(f"{args.subcommand} finished")
        return 0
    except ConfigurationError as e:
        logger.error(f"Configuration error: {str(e)}")
        write_json(_error_record(e), output_dir / "error.json")
        return 2
    except Exception as e:
        logger.exception(f"{args.subcommand} failed: {str(e)}")
        write_json(_error_record(e), output_dir / "error.json")
        return 1
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
