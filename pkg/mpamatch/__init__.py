"""
mpamatch

Semi-supervised histopathology segmentation with visual and textual prototype alignment,
dual-stream consistency regularization and a foundation-model patch encoder.
"""

from mpamatch._version import __version__
from mpamatch.ablation import ablate, compare_supervision
from mpamatch.augment import (
    color_jitter,
    feature_perturb,
    invert_transform,
    make_unlabeled_views,
    sample_cutmix_box,
    strong_augment,
    weak_augment,
)
from mpamatch.datasets import (
    DATASET_PRESETS,
    SegmentationBatch,
    SegmentationDataset,
    SegmentationSample,
    load_manifest,
    make_synthetic,
    save_manifest,
    scan,
    split,
)
from mpamatch.exceptions import (
    ConfigError,
    DataError,
    EmptyManifestError,
    InitializationError,
    MissingMaskError,
    MPAMatchError,
    NumericAbort,
    PaletteError,
    ShapeError,
    SplitError,
    ValidationError,
)
from mpamatch.losses import pal_loss, pcl_loss, supervised_loss, total_loss, unlabeled_loss
from mpamatch.metrics import ConfusionMatrix
from mpamatch.models import (
    AblationResult,
    AblationRow,
    AugmentationRecord,
    AugmentConfig,
    ClassPromptSet,
    CutMixRecord,
    DataConfig,
    DatasetManifest,
    DecoderSpec,
    EncoderSpec,
    FitResult,
    GeometricTransform,
    LossReport,
    LossWeights,
    MetricReport,
    ModelConfig,
    OptimizerConfig,
    ProtoConfig,
    RunConfig,
    SupervisionComparison,
    SweepSpec,
    SyntheticSpec,
    TextConfig,
)
from mpamatch.prefetch import PrefetchLoader
from mpamatch.protovis import PrototypeBank, ProtoHead, assign, fuse, init_prototypes, proto_head, similarity, update_bank
from mpamatch.prototext import (
    HashTextEncoder,
    TextEncoderAdapter,
    TextPrototypes,
    embed_descriptions,
    fuse_tokens,
    load_prompt_sets,
    project_text,
)
from mpamatch.segmodel import Decoder, SegmentationModel, StandInEncoder, decode, encode, tokens_to_grid
from mpamatch.trainer import (
    TrainState,
    build_state,
    evaluate,
    evaluate_checkpoint,
    fit,
    load_checkpoint,
    poly_lr,
    save_checkpoint,
    train_step,
)

__all__ = [
    # Version
    "__version__",
    # Network
    "StandInEncoder",
    "Decoder",
    "SegmentationModel",
    "encode",
    "decode",
    "tokens_to_grid",
    # Visual prototypes
    "PrototypeBank",
    "ProtoHead",
    "init_prototypes",
    "similarity",
    "assign",
    "update_bank",
    "fuse",
    "proto_head",
    # Text prototypes
    "ClassPromptSet",
    "TextEncoderAdapter",
    "HashTextEncoder",
    "TextPrototypes",
    "load_prompt_sets",
    "embed_descriptions",
    "fuse_tokens",
    "project_text",
    # Losses
    "supervised_loss",
    "unlabeled_loss",
    "pal_loss",
    "pcl_loss",
    "total_loss",
    # Augmentation
    "weak_augment",
    "strong_augment",
    "color_jitter",
    "sample_cutmix_box",
    "feature_perturb",
    "invert_transform",
    "make_unlabeled_views",
    # Data
    "DATASET_PRESETS",
    "SegmentationDataset",
    "SegmentationSample",
    "SegmentationBatch",
    "scan",
    "split",
    "make_synthetic",
    "save_manifest",
    "load_manifest",
    "PrefetchLoader",
    # Metrics
    "ConfusionMatrix",
    # Pipeline
    "TrainState",
    "build_state",
    "train_step",
    "fit",
    "evaluate",
    "evaluate_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "poly_lr",
    "ablate",
    "compare_supervision",
    # Models
    "EncoderSpec",
    "DecoderSpec",
    "ProtoConfig",
    "TextConfig",
    "ModelConfig",
    "LossWeights",
    "LossReport",
    "OptimizerConfig",
    "AugmentConfig",
    "DataConfig",
    "RunConfig",
    "SyntheticSpec",
    "DatasetManifest",
    "GeometricTransform",
    "CutMixRecord",
    "AugmentationRecord",
    "MetricReport",
    "SweepSpec",
    "AblationRow",
    "AblationResult",
    "SupervisionComparison",
    "FitResult",
    # Exceptions
    "MPAMatchError",
    "ConfigError",
    "DataError",
    "EmptyManifestError",
    "MissingMaskError",
    "PaletteError",
    "SplitError",
    "ShapeError",
    "ValidationError",
    "InitializationError",
    "NumericAbort",
]
