"""
Pydantic models for configuration, records and reports.

These models validate every run configuration before any work starts and give the
training log, manifests and metric reports a fixed serialized form.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from mpamatch.exceptions import ConfigError

SimilarityMode = Literal["cosine", "dot", "euclidean"]
PromptTag = Literal["P-nonsim", "P-simL", "P-simLD", "T-nonsim", "custom"]
SplitName = Literal["train", "train_labeled", "train_unlabeled", "test"]


def _check_range(value: tuple[float, float], name: str) -> tuple[float, float]:
    low, high = value
    if low > high:
        raise ValueError(f"{name} lower bound {low} exceeds upper bound {high}")
    return value


class EncoderSpec(BaseModel):
    """Patch-token encoder geometry and variant."""

    model_config = ConfigDict(extra="forbid")

    variant: Literal["stand_in", "external_adapter"] = Field(
        default="stand_in", description="stand_in (random init) or external_adapter (weights on disk)"
    )
    input_size: int = Field(default=256, ge=8, description="Pixels per side (square input)")
    patch_size: int = Field(default=16, ge=1, description="Pixels per patch side")
    token_dim: int = Field(default=1024, ge=8, description="Channels of each patch token")
    depth: int = Field(default=2, ge=0, le=24, description="Stand-in transformer layers")
    num_heads: int = Field(default=8, ge=1, description="Stand-in attention heads")
    weights_path: str | None = Field(default=None, description="Adapter weight file")
    arch: str = Field(default="vit_large_patch16_224", description="timm architecture of the adapter")

    @model_validator(mode="after")
    def check_geometry(self) -> "EncoderSpec":
        if self.input_size % self.patch_size:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by patch_size {self.patch_size}"
            )
        if math.isqrt(self.token_count) ** 2 != self.token_count:
            raise ValueError(f"token count {self.token_count} is not a perfect square")
        if self.token_dim % self.num_heads:
            raise ValueError(f"token_dim {self.token_dim} is not divisible by num_heads {self.num_heads}")
        if self.variant == "external_adapter" and not self.weights_path:
            raise ValueError("external_adapter encoder requires weights_path")
        return self

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_size**2


class DecoderSpec(BaseModel):
    """Channel reduction and upsampling ladder of the decoder."""

    model_config = ConfigDict(extra="forbid")

    reduced_dim: int = Field(default=512, ge=1, description="Channels after the 3x3 reduction")
    block_channels: list[int] = Field(
        default_factory=lambda: [256, 128, 64, 16], min_length=1, description="Upsampling block outputs"
    )
    num_classes: int = Field(default=2, ge=2, description="Segmentation classes C")

    @field_validator("block_channels")
    @classmethod
    def validate_ladder(cls, v: list[int]) -> list[int]:
        if any(c < 1 for c in v):
            raise ValueError("block_channels must be positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError(f"block_channels must be strictly decreasing, got {v}")
        return v

    @property
    def out_channels(self) -> int:
        return self.block_channels[-1]


class ProtoConfig(BaseModel):
    """Visual prototype bank settings."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = Field(default=True, description="Train the visual prototype branch")
    num_prototypes: int = Field(default=4, ge=1, description="Prototypes per class K")
    embed_dim: int = Field(default=64, ge=2, description="Pixel embedding width M")
    similarity: SimilarityMode = Field(default="cosine", description="Pixel-prototype similarity")
    momentum: float = Field(default=0.99, ge=0.0, lt=1.0, description="EMA momentum of bank updates")
    warmup_epochs: int = Field(default=1, ge=0, description="Epochs before prototype losses activate")
    init_pixels_per_class: int = Field(default=2000, ge=1, description="Embeddings sampled per class for k-means")
    head_mode: Literal["main", "average"] = Field(
        default="main", description="Inference head: main only, or average of main and prototype heads"
    )
    mask_threshold: float = Field(default=0.5, gt=0.0, lt=1.0, description="Foreground binarization threshold")


class TextConfig(BaseModel):
    """Textual prototype settings."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = Field(default=True, description="Train the text prototype branch")
    prompt_root: str = Field(default="prompts", description="Directory holding <tag>/<class>.txt files")
    tag: PromptTag = Field(default="P-nonsim", description="Prompt provenance tag")
    coop_tokens: int = Field(default=1, ge=0, le=6, description="Cooperative tokens L per prototype")
    text_dim: int = Field(default=64, ge=2, description="Text embedding width d")
    encoder: Literal["stub", "external"] = Field(default="stub", description="Text encoder adapter")
    weights_path: str | None = Field(default=None, description="Local CLIP-family checkpoint directory")
    freeze_base: bool = Field(default=True, description="Keep description embeddings frozen")
    projection_init: Literal["trunc_normal", "identity"] = Field(default="trunc_normal")

    @model_validator(mode="after")
    def check_external(self) -> "TextConfig":
        if self.encoder == "external" and not self.weights_path:
            raise ValueError("external text encoder requires weights_path")
        return self


class ModelConfig(BaseModel):
    """Network and prototype branches."""

    model_config = ConfigDict(extra="forbid")

    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    decoder: DecoderSpec = Field(default_factory=DecoderSpec)
    proto: ProtoConfig = Field(default_factory=ProtoConfig)
    text: TextConfig = Field(default_factory=TextConfig)


class LossWeights(BaseModel):
    """Every scalar coefficient of the training objective."""

    model_config = ConfigDict(extra="forbid")

    lam: float = Field(default=0.5, ge=0.0, description="Feature-perturbed stream weight (lambda)")
    mu: float = Field(default=0.5, ge=0.0, description="Strong streams weight (mu)")
    tau: float = Field(default=0.95, gt=0.0, lt=1.0, description="Pseudo-label confidence threshold")
    alpha1: float = Field(default=0.5, ge=0.0, description="PAL weight")
    alpha2: float = Field(default=0.5, ge=0.0, description="PCL weight")
    alpha: float = Field(default=0.25, ge=0.0, description="Prototype loss weight")
    beta: float = Field(default=0.5, ge=0.0, description="Supervised loss weight")
    gamma: float = Field(default=0.25, ge=0.0, description="Unlabeled loss weight")
    eps: float = Field(default=1e-6, gt=0.0, description="Dice stabilizer")
    temperature: float = Field(default=0.1, gt=0.0, description="Softmax temperature on prototype scores")
    head: float = Field(default=0.5, ge=0.0, description="Auxiliary prototype-head loss weight")
    soft_pseudo: bool = Field(default=False, description="Soft pseudo-label cross-entropy")


class LossReport(BaseModel):
    """Scalar loss components of one training step."""

    step: int = 0
    epoch: int = 0
    loss_label: float = 0.0
    loss_ce: float = 0.0
    loss_dice: float = 0.0
    loss_unlabel: float = 0.0
    loss_pal_visual: float = 0.0
    loss_pal_text: float = 0.0
    loss_pcl_visual: float = 0.0
    loss_pcl_text: float = 0.0
    loss_proto_head: float = 0.0
    loss_proto: float = 0.0
    loss_total: float = 0.0
    retention: float = Field(default=0.0, ge=0.0, le=1.0)
    lr: float = 0.0

    @field_validator("*")
    @classmethod
    def validate_finite(cls, v: Any) -> Any:
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError("loss report values must be finite")
        return v


class OptimizerConfig(BaseModel):
    """SGD recipe and learning-rate schedule."""

    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.01, gt=0.0, description="Base learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    schedule: Literal["poly", "constant"] = Field(default="poly")
    power: float = Field(default=0.9, gt=0.0, description="Polynomial decay power")


class AugmentConfig(BaseModel):
    """Weak/strong augmentation and feature perturbation settings."""

    model_config = ConfigDict(extra="forbid")

    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    jitter_prob: float = Field(default=0.8, ge=0.0, le=1.0)
    jitter_range: tuple[float, float] = Field(default=(0.6, 1.4))
    cutmix_prob: float = Field(default=1.0, ge=0.0, le=1.0)
    cutmix_area: tuple[float, float] = Field(default=(0.1, 0.5))
    cutmix_aspect: tuple[float, float] = Field(default=(0.5, 2.0))
    feature_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    dump_records: bool = Field(default=False, description="Write augment.jsonl next to the run")

    @field_validator("jitter_range", "cutmix_area", "cutmix_aspect")
    @classmethod
    def validate_ranges(cls, v: tuple[float, float], info) -> tuple[float, float]:
        v = _check_range(v, info.field_name)
        if v[0] < 0:
            raise ValueError(f"{info.field_name} must be non-negative")
        if info.field_name == "cutmix_area" and v[1] > 1.0:
            raise ValueError("cutmix_area must lie within [0, 1]")
        if info.field_name == "cutmix_aspect" and v[0] <= 0:
            raise ValueError("cutmix_aspect must be positive")
        return v


class DataConfig(BaseModel):
    """Dataset location and splitting."""

    model_config = ConfigDict(extra="forbid")

    manifest: str | None = Field(default=None, description="Path to a manifest.json")
    class_names: list[str] = Field(default_factory=lambda: ["background", "foreground"], min_length=2)
    labeled_fraction: float = Field(default=7 / 9, gt=0.0, le=1.0, description="Labeled share of train")
    test_fraction: float = Field(default=0.1, gt=0.0, lt=1.0, description="Test share without split.json")
    prefetch: int = Field(default=2, ge=0, description="Prefetch queue depth (0 = synchronous)")
    cache_size: int = Field(default=256, ge=0, description="Decoded samples kept per dataset (0 = no cache)")


class RunConfig(BaseModel):
    """Complete, validated configuration of a training run."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    epochs: int = Field(default=40, ge=0)
    batch_size: int = Field(default=1, ge=1)
    max_steps: int | None = Field(default=None, ge=1, description="Hard cap on optimizer steps")
    output_dir: str = Field(default="runs/default")
    eval_split: SplitName = Field(default="test")
    export_masks: bool = Field(default=False)
    progress: bool = Field(default=True)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        if len(self.data.class_names) != self.model.decoder.num_classes:
            raise ValueError(
                f"{len(self.data.class_names)} class names for {self.model.decoder.num_classes} classes"
            )
        if self.model.text.projection_init == "identity" and (
            self.model.text.text_dim != self.model.proto.embed_dim
        ):
            raise ValueError("identity text projection requires text_dim == embed_dim")
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except PydanticValidationError as e:
            raise ConfigError(f"Invalid run configuration: {e}") from e

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"Malformed YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a mapping")
        return cls.from_dict(data)

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def model_hash(self) -> str:
        """Hash of the parts that fix parameter shapes; checkpoints must match it."""
        canonical = json.dumps(
            {
                "encoder": self.model.encoder.model_dump(mode="json", exclude={"weights_path"}),
                "decoder": self.model.decoder.model_dump(mode="json"),
                "proto": [self.model.proto.num_prototypes, self.model.proto.embed_dim],
                "text": [self.model.text.enabled, self.model.text.coop_tokens, self.model.text.text_dim],
            },
            sort_keys=True,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted keys (e.g. ``loss.tau``) replaced."""
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if not isinstance(node.get(key), dict):
                    raise ConfigError(f"Unknown config section '{dotted}'")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"Unknown config key '{dotted}'")
            node[leaf] = value
        return RunConfig.from_dict(data)


class SyntheticSpec(BaseModel):
    """Desk-scale synthetic dataset recipe."""

    num_images: int = Field(default=10, ge=1)
    size: int = Field(default=64, ge=8)
    num_classes: int = Field(default=2, ge=2)
    shape_family: Literal["ellipses", "blobs"] = Field(default="ellipses")
    noise: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_coverage(self) -> "SyntheticSpec":
        if self.num_images < self.num_classes - 1:
            raise ValueError("need at least one image per foreground class")
        return self


class ManifestEntry(BaseModel):
    """One image (and optional mask) of a dataset."""

    id: str
    image: str
    mask: str | None = None
    split: SplitName = "train"
    image_hash: str
    mask_hash: str | None = None
    classes: list[int] = Field(default_factory=list, description="Class indices present in the mask")
    unlabeled_only: bool = Field(default=False, description="No usable mask; never enters the labeled pool")


class DatasetManifest(BaseModel):
    """Scanned dataset with palette, splits and content hashes."""

    schema_version: int = 1
    name: str
    root: str
    palette: dict[int, int] = Field(description="Mask pixel value -> class index")
    nonzero_class: int | None = Field(
        default=None, ge=0, description="Class of nonzero mask values absent from the palette"
    )
    entries: list[ManifestEntry] = Field(default_factory=list)
    predefined_split: bool = False

    @property
    def num_classes(self) -> int:
        top = max(self.palette.values())
        return max(top, self.nonzero_class or 0) + 1

    def by_split(self, *splits: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split in splits]

    def counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.entries:
            counts[entry.split] = counts.get(entry.split, 0) + 1
        return counts

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class ClassPromptSet(BaseModel):
    """K descriptions of one class, with their provenance tag."""

    class_name: str
    descriptions: list[str] = Field(min_length=1)
    tag: PromptTag = "custom"

    @field_validator("descriptions")
    @classmethod
    def validate_descriptions(cls, v: list[str]) -> list[str]:
        if any(not d.strip() for d in v):
            raise ValueError("descriptions must be non-empty strings")
        return v


class GeometricTransform(BaseModel):
    """Invertible geometric part of the weak augmentation."""

    flip: bool = False
    source_size: tuple[int, int]
    size: int


class CutMixRecord(BaseModel):
    """CutMix box (half-open pixel rectangle) pasted from a partner image."""

    y0: int = 0
    x0: int = 0
    y1: int = 0
    x1: int = 0
    partner_id: str | None = None

    @property
    def area(self) -> int:
        return max(self.y1 - self.y0, 0) * max(self.x1 - self.x0, 0)


class AugmentationRecord(BaseModel):
    """Everything needed to reproduce the views of one unlabeled sample."""

    sample_id: str
    seed: int
    weak: GeometricTransform
    jitter: list[list[float] | None] = Field(default_factory=list, description="Per strong view")
    cutmix: list[CutMixRecord] = Field(default_factory=list)


class ClassMetrics(BaseModel):
    """Per-class segmentation quality."""

    index: int
    name: str
    iou: float
    dice: float
    cpa: float
    present: bool = True


class MetricReport(BaseModel):
    """Macro-averaged mIoU, mDice and mCPA with the per-class table."""

    miou: float
    mdice: float
    mcpa: float
    per_class: list[ClassMetrics]
    include_background: bool = True
    absent_classes: list[int] = Field(default_factory=list)
    pixels: int = 0
    note: str | None = None

    def to_table(self) -> str:
        """Aligned plain-text table, values in percent."""
        lines = [f"{'Class':<16}{'DICE':>8}{'IOU':>8}{'CPA':>8}"]
        for row in self.per_class:
            if not row.present:
                continue
            lines.append(f"{row.name:<16}{row.dice * 100:>8.2f}{row.iou * 100:>8.2f}{row.cpa * 100:>8.2f}")
        lines.append(f"{'mDICE':>10}{'mIOU':>8}{'mCPA':>8}")
        lines.append(f"{self.mdice * 100:>10.2f}{self.miou * 100:>8.2f}{self.mcpa * 100:>8.2f}")
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines)


class SweepSpec(BaseModel):
    """One ablation axis and the values to run."""

    axis: Literal["prompt_tag", "coop_tokens", "unlabeled_percent", "tau"]
    values: list[Any] = Field(min_length=1)

    @model_validator(mode="after")
    def check_values(self) -> "SweepSpec":
        for value in self.values:
            if self.axis == "coop_tokens" and not (isinstance(value, int) and 0 <= value <= 6):
                raise ValueError(f"coop_tokens values must be integers in 0..6, got {value!r}")
            if self.axis == "tau" and not (0.0 < float(value) < 1.0):
                raise ValueError(f"tau values must lie in (0, 1), got {value!r}")
            if self.axis == "unlabeled_percent" and not (0.0 <= float(value) < 100.0):
                raise ValueError(f"unlabeled_percent values must lie in [0, 100), got {value!r}")
        return self


class AblationRow(BaseModel):
    """Best metrics of one ablation run."""

    axis: str
    value: str
    mdice: float
    miou: float
    mcpa: float
    retention: float
    output_dir: str


class AblationResult(BaseModel):
    """All rows of one sweep and where their CSV was written."""

    axis: str
    rows: list[AblationRow] = Field(default_factory=list)
    csv_path: str | None = None


class SupervisionComparison(BaseModel):
    """Held-out mDice of semi-supervised versus label-only training, per seed."""

    seeds: list[int]
    semi_mdice: list[float]
    label_only_mdice: list[float]

    @property
    def mean_semi(self) -> float:
        return sum(self.semi_mdice) / len(self.semi_mdice)

    @property
    def mean_label_only(self) -> float:
        return sum(self.label_only_mdice) / len(self.label_only_mdice)

    @property
    def benefit(self) -> float:
        return self.mean_semi - self.mean_label_only


class FitResult(BaseModel):
    """Outcome of a training run."""

    best_checkpoint: str | None = None
    last_checkpoint: str | None = None
    best_mdice: float = 0.0
    history: list[dict[str, Any]] = Field(default_factory=list)
    mean_retention: float = 0.0
    steps: int = 0
