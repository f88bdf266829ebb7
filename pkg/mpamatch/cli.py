"""
Command line interface.

    mpamatch train --config run.yaml [--resume last.pt] [--set loss.tau=0.9]
    mpamatch eval --checkpoint best.pt [--split test] [--export DIR]
    mpamatch ablate --config run.yaml --axis tau --values 0.9 0.95 0.99
    mpamatch compare --config run.yaml --seeds 0 1 2
    mpamatch data scan|split|synth ...
    mpamatch config schema|validate

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import yaml

from mpamatch._version import __version__
from mpamatch.ablation import ablate, compare_supervision
from mpamatch.datasets import DATASET_PRESETS, MANIFEST_FILENAME, load_manifest, make_synthetic, save_manifest, scan, split
from mpamatch.exceptions import ConfigError, MPAMatchError
from mpamatch.models import RunConfig, SweepSpec, SyntheticSpec
from mpamatch.trainer import evaluate_checkpoint, fit

logger = logging.getLogger("mpamatch")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def setup_logging(level: str = "INFO", log_file: str | Path | None = None) -> None:
    """Timestamped logging on stderr, plus a file handler for runs."""
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, handlers=handlers, force=True)


def _parse_value(text: str) -> Any:
    """YAML scalar parsing, so '0.9' -> 0.9, 'true' -> True, 'P-simL' -> 'P-simL'."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_overrides(pairs: list[str] | None) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override '{pair}' is not of the form key=value")
        overrides[key.strip()] = _parse_value(value.strip())
    return overrides


def parse_palette(text: str) -> dict[int, int]:
    """'0:0,255:1' -> {0: 0, 255: 1}."""
    palette: dict[int, int] = {}
    try:
        for item in text.split(","):
            value, cls = item.split(":")
            palette[int(value)] = int(cls)
    except ValueError as e:
        raise ConfigError(f"Malformed palette '{text}'; expected value:class pairs") from e
    return palette


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    config = RunConfig.from_yaml(path)
    parsed = parse_overrides(overrides)
    return config.with_overrides(parsed) if parsed else config


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    if args.output_dir:
        config = config.with_overrides({"output_dir": args.output_dir})
    setup_logging(args.log_level, Path(config.output_dir) / "train.log")
    logger.info("mpamatch %s, config hash %s", __version__, config.config_hash()[:12])
    result = fit(config, resume=args.resume)
    print(json.dumps(result.model_dump(exclude={"history"}), indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_checkpoint(
        args.checkpoint,
        args.manifest,
        args.split,
        export_dir=args.export,
        include_background=not args.foreground_only,
    )
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(report.model_dump_json(indent=2) if args.json else report.to_table())
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    try:
        sweep = SweepSpec(axis=args.axis, values=[_parse_value(v) for v in args.values])
    except ValueError as e:
        raise ConfigError(f"Invalid sweep: {e}") from e
    output_root = args.output_root or config.output_dir
    setup_logging(args.log_level, Path(output_root) / "ablation.log")
    result = ablate(config, sweep, output_root=output_root)
    print(f"{'value':<12}{'mDICE':>8}{'mIOU':>8}{'mCPA':>8}{'retention':>11}")
    for row in result.rows:
        print(f"{row.value:<12}{row.mdice * 100:>8.2f}{row.miou * 100:>8.2f}{row.mcpa * 100:>8.2f}{row.retention:>11.3f}")
    print(f"csv: {result.csv_path}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    result = compare_supervision(config, args.seeds, output_root=args.output_root)
    print(
        json.dumps(
            {
                **result.model_dump(),
                "mean_semi": result.mean_semi,
                "mean_label_only": result.mean_label_only,
                "benefit": result.benefit,
            },
            indent=2,
        )
    )
    return 0


def cmd_data_scan(args: argparse.Namespace) -> int:
    palette = None
    name = args.name
    nonzero_class = args.nonzero_class
    if args.preset:
        preset = DATASET_PRESETS[args.preset]
        palette, name = preset.palette, name or preset.name
        if nonzero_class is None:
            nonzero_class = preset.nonzero_class
    if args.palette:
        palette = parse_palette(args.palette)
    manifest = scan(args.root, palette, name, nonzero_class)
    out = Path(args.out or Path(args.root) / MANIFEST_FILENAME)
    save_manifest(manifest, out)
    if args.preset:
        preset = DATASET_PRESETS[args.preset]
        counts = manifest.counts()
        if manifest.predefined_split and (counts.get("train", 0), counts.get("test", 0)) != (
            preset.train_count,
            preset.test_count,
        ):
            logger.warning(
                "%s split is %s, official sizes are %d/%d", preset.name, counts, preset.train_count, preset.test_count
            )
    print(json.dumps({"manifest": str(out), "entries": len(manifest.entries), "splits": manifest.counts()}))
    return 0


def cmd_data_split(args: argparse.Namespace) -> int:
    manifest = split(load_manifest(args.manifest), args.labeled_fraction, args.seed, args.test_fraction)
    out = args.out or args.manifest
    save_manifest(manifest, out)
    print(json.dumps({"manifest": str(out), "splits": manifest.counts()}))
    return 0


def cmd_data_synth(args: argparse.Namespace) -> int:
    try:
        spec = SyntheticSpec(
            num_images=args.num_images,
            size=args.size,
            num_classes=args.classes,
            shape_family=args.shape,
            noise=args.noise,
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError(f"Invalid synthetic spec: {e}") from e
    manifest = make_synthetic(spec, args.root)
    print(json.dumps({"manifest": str(Path(args.root) / MANIFEST_FILENAME), "entries": len(manifest.entries)}))
    return 0


def cmd_config_schema(args: argparse.Namespace) -> int:
    print(json.dumps(RunConfig.model_json_schema(), indent=2))
    return 0


def cmd_config_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    print(json.dumps({"valid": True, "config_hash": config.config_hash()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpamatch", description="Semi-supervised histopathology segmentation")
    parser.add_argument("--version", action="version", version=f"mpamatch {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--output-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Dotted config override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train_labeled", "train_unlabeled", "test"])
    p.add_argument("--manifest", help="Manifest to evaluate on (defaults to the run's)")
    p.add_argument("--export", help="Directory for predicted masks and overlays")
    p.add_argument("--foreground-only", action="store_true", help="Exclude background from averages")
    p.add_argument("--json", action="store_true", help="Print the JSON report instead of the table")
    p.add_argument("--out", help="Write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Sweep one axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--output-root")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="Semi-supervised versus label-only training")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--output-root")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_compare)

    data = sub.add_parser("data", help="Dataset tools").add_subparsers(dest="data_command", required=True)
    p = data.add_parser("scan", help="Build a manifest from images/ and masks/")
    p.add_argument("root")
    p.add_argument("--palette", help="value:class pairs, e.g. 0:0,255:1")
    p.add_argument("--preset", choices=sorted(DATASET_PRESETS))
    p.add_argument("--nonzero-class", type=int, help="Class for nonzero mask values outside the palette")
    p.add_argument("--name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_data_scan)

    p = data.add_parser("split", help="Assign labeled/unlabeled/test splits")
    p.add_argument("manifest")
    p.add_argument("--labeled-fraction", type=float, default=7 / 9)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_data_split)

    p = data.add_parser("synth", help="Generate a synthetic dataset")
    p.add_argument("root")
    p.add_argument("--num-images", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--shape", choices=["ellipses", "blobs"], default="ellipses")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_data_synth)

    cfg = sub.add_parser("config", help="Configuration tools").add_subparsers(dest="config_command", required=True)
    p = cfg.add_parser("schema", help="Print the run configuration JSON schema")
    p.set_defaults(func=cmd_config_schema)
    p = cfg.add_parser("validate", help="Validate a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_config_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except MPAMatchError as e:
        logger.error("%s: %s", type(e).__name__, e.message)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
