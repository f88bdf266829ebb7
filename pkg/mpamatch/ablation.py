"""
Ablation sweeps over one configuration axis, and the semi- versus fully-supervised comparison.
"""

import csv
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from mpamatch.datasets import load_manifest, split
from mpamatch.exceptions import ConfigError, DataError
from mpamatch.models import (
    AblationResult,
    AblationRow,
    DatasetManifest,
    RunConfig,
    SupervisionComparison,
    SweepSpec,
)
from mpamatch.trainer import fit

logger = logging.getLogger(__name__)

AXES = ("prompt_tag", "coop_tokens", "unlabeled_percent", "tau")
CSV_FIELDS = ["axis", "value", "mdice", "miou", "mcpa", "retention", "output_dir"]


def axis_overrides(axis: str, value: Any) -> dict[str, Any]:
    """Dotted config overrides that realise one sweep value."""
    if axis == "prompt_tag":
        return {"model.text.tag": str(value)}
    if axis == "coop_tokens":
        return {"model.text.coop_tokens": int(value)}
    if axis == "tau":
        return {"loss.tau": float(value)}
    if axis == "unlabeled_percent":
        return {"data.labeled_fraction": 1.0 - float(value) / 100.0}
    raise ConfigError(f"Unknown ablation axis '{axis}'; expected one of {', '.join(AXES)}")


def _base_manifest(config: RunConfig, manifest: DatasetManifest | None) -> DatasetManifest:
    if manifest is not None:
        return manifest
    if not config.data.manifest:
        raise DataError("No dataset manifest configured (data.manifest)")
    return load_manifest(config.data.manifest)


def _best_row(history: list[dict[str, Any]]) -> dict[str, Any]:
    if not history:
        raise DataError("Run finished without an evaluation")
    return max(history, key=lambda entry: entry["mdice"])


def write_csv(rows: Sequence[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump())
    return path


def ablate(
    config: RunConfig,
    sweep: SweepSpec,
    manifest: DatasetManifest | None = None,
    output_root: str | Path | None = None,
) -> AblationResult:
    """
    Train once per sweep value under the shared seed and tabulate the best epoch of each run.

    Each run re-splits the dataset with its own labeled fraction, so the unlabeled-percent
    axis changes only the labeled/unlabeled boundary while the test hold-out stays fixed.

    Raises:
        ConfigError: If the axis is unknown
    """
    if sweep.axis not in AXES:
        raise ConfigError(f"Unknown ablation axis '{sweep.axis}'")
    base = _base_manifest(config, manifest)
    root = Path(output_root or config.output_dir)

    rows: list[AblationRow] = []
    for value in sweep.values:
        run_dir = root / f"{sweep.axis}={value}"
        run_config = config.with_overrides({**axis_overrides(sweep.axis, value), "output_dir": str(run_dir)})
        run_manifest = split(base, run_config.data.labeled_fraction, run_config.seed, run_config.data.test_fraction)
        logger.info("Ablation %s=%s -> %s", sweep.axis, value, run_dir)
        result = fit(run_config, run_manifest)
        best = _best_row(result.history)
        rows.append(
            AblationRow(
                axis=sweep.axis,
                value=str(value),
                mdice=best["mdice"],
                miou=best["miou"],
                mcpa=best["mcpa"],
                retention=result.mean_retention,
                output_dir=str(run_dir),
            )
        )

    csv_path = write_csv(rows, root / f"ablation_{sweep.axis}.csv")
    return AblationResult(axis=sweep.axis, rows=rows, csv_path=str(csv_path))


def compare_supervision(
    config: RunConfig,
    seeds: Sequence[int],
    manifest: DatasetManifest | None = None,
    output_root: str | Path | None = None,
) -> SupervisionComparison:
    """
    Train each seed twice on the same split: with the unlabeled stream, and label-only
    (unlabeled images removed, gamma = alpha = 0, so neither the consistency nor the
    prototype term contributes). Reports the final held-out mDice of both.
    """
    if not seeds:
        raise ConfigError("compare_supervision needs at least one seed")
    base = _base_manifest(config, manifest)
    root = Path(output_root or config.output_dir)
    semi, label_only = [], []
    for seed in seeds:
        seeded = config.with_overrides({"seed": seed})
        run_manifest = split(base, seeded.data.labeled_fraction, seed, seeded.data.test_fraction)
        if not run_manifest.by_split("train_unlabeled"):
            raise DataError("Comparison needs unlabeled images; lower data.labeled_fraction")
        labeled_only = run_manifest.model_copy(
            update={"entries": [e for e in run_manifest.entries if e.split != "train_unlabeled"]}
        )

        semi_run = fit(seeded.with_overrides({"output_dir": str(root / f"seed={seed}" / "semi")}), run_manifest)
        label_only_overrides = {
            "output_dir": str(root / f"seed={seed}" / "label_only"),
            "loss.gamma": 0.0,
            "loss.alpha": 0.0,
        }
        sup_run = fit(
            seeded.with_overrides(label_only_overrides),
            labeled_only,
        )
        semi.append(semi_run.history[-1]["mdice"])
        label_only.append(sup_run.history[-1]["mdice"])
        logger.info("Seed %d: semi %.4f, label-only %.4f", seed, semi[-1], label_only[-1])

    return SupervisionComparison(seeds=list(seeds), semi_mdice=semi, label_only_mdice=label_only)
