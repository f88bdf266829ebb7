"""
Visual prototype bank.

K prototypes per class live in a C x K x M bank. They are initialized by k-means over
labeled pixel embeddings, assigned to pixels by the most similar prototype of the
pixel's class, updated by an EMA of per-batch means, and fused back into pixel
features through cross-attention for an auxiliary prototype head.
"""

import logging
import math
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from mpamatch.exceptions import InitializationError, ShapeError, ValidationError
from mpamatch.models import SimilarityMode

logger = logging.getLogger(__name__)

BANK_MAGIC = b"MPAB"
BANK_VERSION = 1
_MODES: tuple[str, ...] = ("cosine", "dot", "euclidean")
# magic, version, C, K, M, similarity mode, momentum
_HEADER = struct.Struct("<4sHIIIBd")


@dataclass
class PrototypeBank:
    """C x K x M prototype matrix with per-prototype occupancy counts."""

    prototypes: torch.Tensor
    counts: torch.Tensor
    momentum: float = 0.99
    similarity: SimilarityMode = "cosine"

    def __post_init__(self) -> None:
        if self.prototypes.dim() != 3:
            raise ShapeError(f"Prototypes must be C x K x M, got {tuple(self.prototypes.shape)}")
        if tuple(self.counts.shape) != tuple(self.prototypes.shape[:2]):
            raise ShapeError("Counts must be C x K")
        if not torch.isfinite(self.prototypes).all():
            raise ValidationError("Prototype vectors must be finite")
        if (self.counts < 0).any():
            raise ValidationError("Prototype counts must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"Momentum must lie in [0, 1), got {self.momentum}")
        if self.similarity not in _MODES:
            raise ValidationError(f"Unknown similarity mode '{self.similarity}'")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def flat(self) -> torch.Tensor:
        """CK x M matrix; row c * K + k is prototype k of class c."""
        return self.prototypes.reshape(-1, self.dim)

    def snapshot(self) -> "PrototypeBank":
        """Immutable-by-convention copy for readers."""
        return PrototypeBank(self.prototypes.clone(), self.counts.clone(), self.momentum, self.similarity)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            BANK_MAGIC,
            BANK_VERSION,
            self.num_classes,
            self.num_prototypes,
            self.dim,
            _MODES.index(self.similarity),
            float(self.momentum),
        )
        protos = self.prototypes.detach().cpu().to(torch.float32).contiguous().numpy()
        counts = self.counts.detach().cpu().to(torch.int64).contiguous().numpy()
        return header + protos.astype("<f4").tobytes() + counts.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrototypeBank":
        if len(data) < _HEADER.size:
            raise ValidationError("Prototype bank blob is truncated")
        magic, version, c, k, m, mode, momentum = _HEADER.unpack_from(data)
        if magic != BANK_MAGIC:
            raise ValidationError("Not a prototype bank blob")
        if version != BANK_VERSION:
            raise ValidationError(f"Unsupported prototype bank version {version}")
        offset = _HEADER.size
        n_protos, n_counts = c * k * m * 4, c * k * 8
        if len(data) != offset + n_protos + n_counts:
            raise ValidationError("Prototype bank blob size does not match its header")
        protos = np.frombuffer(data, dtype="<f4", count=c * k * m, offset=offset).reshape(c, k, m)
        counts = np.frombuffer(data, dtype="<i8", count=c * k, offset=offset + n_protos).reshape(c, k)
        return cls(
            torch.from_numpy(protos.astype(np.float32)),
            torch.from_numpy(counts.astype(np.int64)),
            momentum,
            _MODES[mode],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeBank":
        return cls.from_bytes(Path(path).read_bytes())


class AssignmentMap(NamedTuple):
    """Per-pixel class c, prototype k within the class, flat index c * K + k, validity."""

    cls: torch.Tensor
    proto: torch.Tensor
    flat: torch.Tensor
    valid: torch.Tensor


def init_prototypes(
    embeddings: Sequence[torch.Tensor | np.ndarray] | Mapping[int, torch.Tensor | np.ndarray],
    num_prototypes: int,
    seed: int = 0,
    similarity: SimilarityMode = "cosine",
    momentum: float = 0.99,
    class_names: Sequence[str] | None = None,
) -> PrototypeBank:
    """
    Initialize K prototypes per class by k-means (k-means++ seeding, 20 iterations).

    Args:
        embeddings: Per-class N_c x M embeddings, as a list indexed by class or a mapping
        num_prototypes: K
        seed: Random state of k-means and of the padding jitter
        similarity: Bank similarity mode; cosine banks are stored unit-norm
        momentum: EMA momentum of later updates
        class_names: Names used in error messages

    Raises:
        InitializationError: If a class has no embeddings
    """
    if num_prototypes < 1:
        raise InitializationError(f"K must be at least 1, got {num_prototypes}")
    if isinstance(embeddings, Mapping):
        num_classes = max(embeddings) + 1 if embeddings else 0
        per_class = [embeddings.get(c) for c in range(num_classes)]
    else:
        per_class = list(embeddings)
    if not per_class:
        raise InitializationError("No classes to initialize")

    centers = []
    for c, emb in enumerate(per_class):
        name = class_names[c] if class_names is not None and c < len(class_names) else str(c)
        if emb is None or len(emb) == 0:
            raise InitializationError(f"Class '{name}' has no embeddings to initialize prototypes")
        x = emb.detach().cpu().double().numpy() if isinstance(emb, torch.Tensor) else np.asarray(emb, float)

        n_clusters = min(num_prototypes, len(x))
        kmeans = KMeans(
            n_clusters=n_clusters, init="k-means++", n_init=1, max_iter=20, random_state=seed
        ).fit(x)
        found = kmeans.cluster_centers_
        if n_clusters < num_prototypes:
            logger.info("Class '%s' has %d embeddings for K=%d; padding", name, len(x), num_prototypes)
            rng = np.random.default_rng([seed, c])
            extra = found[np.arange(num_prototypes - n_clusters) % n_clusters]
            found = np.concatenate([found, extra + rng.normal(0.0, 1e-3, size=extra.shape)])
        centers.append(found)

    prototypes = torch.from_numpy(np.stack(centers)).to(torch.float32)
    if similarity == "cosine":
        prototypes = F.normalize(prototypes, dim=-1)
    counts = torch.zeros(prototypes.shape[:2], dtype=torch.int64)
    return PrototypeBank(prototypes, counts, momentum, similarity)


def _as_matrix(prototypes: "PrototypeBank | torch.Tensor") -> torch.Tensor:
    if isinstance(prototypes, PrototypeBank):
        return prototypes.flat()
    return prototypes.reshape(-1, prototypes.shape[-1])


def similarity(
    features: torch.Tensor,
    prototypes: "PrototypeBank | torch.Tensor",
    mode: SimilarityMode | None = None,
) -> torch.Tensor:
    """
    Score N x M pixel features against every prototype.

    Cosine scores lie in [-1, 1] and zero-norm features score 0; euclidean scores are
    negative squared distances.
    """
    if mode is None:
        mode = prototypes.similarity if isinstance(prototypes, PrototypeBank) else "cosine"
    matrix = _as_matrix(prototypes).to(features)
    if features.shape[-1] != matrix.shape[-1]:
        raise ShapeError(f"Feature width {features.shape[-1]} != prototype width {matrix.shape[-1]}")

    if mode == "cosine":
        return F.normalize(features, dim=-1) @ F.normalize(matrix, dim=-1).T
    if mode == "dot":
        return features @ matrix.T
    if mode == "euclidean":
        sq = features.pow(2).sum(-1, keepdim=True) - 2 * features @ matrix.T + matrix.pow(2).sum(-1)
        return -sq.clamp_min(0.0)
    raise ValidationError(f"Unknown similarity mode '{mode}'")


@torch.no_grad()
def assign(
    features: torch.Tensor,
    labels: torch.Tensor,
    bank: "PrototypeBank | torch.Tensor",
    valid: torch.Tensor | None = None,
    mode: SimilarityMode | None = None,
) -> AssignmentMap:
    """
    Assign every pixel to the most similar prototype of its own class.

    Pixels whose label is outside [0, C) or whose valid flag is False are marked invalid.
    Ties resolve to the lowest k.
    """
    if isinstance(bank, PrototypeBank):
        num_classes, k = bank.num_classes, bank.num_prototypes
    else:
        num_classes, k = bank.shape[0], bank.shape[1]
    n = features.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"Expected {n} labels, got shape {tuple(labels.shape)}")

    in_range = (labels >= 0) & (labels < num_classes)
    valid = in_range if valid is None else in_range & valid.bool()
    cls = labels.long().clamp(0, num_classes - 1)

    scores = similarity(features, bank, mode).view(n, num_classes, k)
    own = scores.gather(1, cls.view(n, 1, 1).expand(n, 1, k)).squeeze(1)
    proto = own.argmax(dim=1)
    return AssignmentMap(cls, proto, cls * k + proto, valid)


@torch.no_grad()
def update_bank(bank: PrototypeBank, features: torch.Tensor, assignment: AssignmentMap) -> PrototypeBank:
    """
    EMA update of every prototype that received pixels in this batch.

    mu <- m * mu + (1 - m) * mean(assigned features), renormalized in cosine mode.
    Prototypes without assignments keep their value.
    """
    index = assignment.flat[assignment.valid]
    if index.numel() == 0:
        return bank.snapshot()

    feats = features.detach()[assignment.valid].to(bank.prototypes.dtype)
    total = bank.num_classes * bank.num_prototypes
    sums = torch.zeros(total, bank.dim, dtype=feats.dtype).index_add_(0, index, feats)
    hits = torch.bincount(index, minlength=total)
    touched = hits > 0

    matrix = bank.flat().clone()
    means = sums[touched] / hits[touched].unsqueeze(1).to(feats.dtype)
    matrix[touched] = bank.momentum * matrix[touched] + (1.0 - bank.momentum) * means
    if bank.similarity == "cosine":
        matrix[touched] = F.normalize(matrix[touched], dim=-1)

    counts = bank.counts + hits.view_as(bank.counts)
    return PrototypeBank(matrix.view_as(bank.prototypes), counts, bank.momentum, bank.similarity)


@torch.no_grad()
def clustering_objective(features: torch.Tensor, assignment: AssignmentMap, bank: PrototypeBank) -> float:
    """Sum of squared distances between valid pixels and their assigned prototypes."""
    if not assignment.valid.any():
        return 0.0
    feats = features[assignment.valid].to(bank.prototypes.dtype)
    assigned = bank.flat()[assignment.flat[assignment.valid]]
    return float((feats - assigned).pow(2).sum())


def fuse(
    features: torch.Tensor,
    prototypes: "PrototypeBank | torch.Tensor",
    return_weights: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """
    Cross-attention of pixel features (queries) over the CK prototypes (keys and values).

    Returns softmax(Q K^T / sqrt(M)) V, plus the attention matrix if requested.
    """
    matrix = _as_matrix(prototypes).to(features)
    weights = torch.softmax(features @ matrix.T / math.sqrt(features.shape[-1]), dim=-1)
    attended = weights @ matrix
    return (attended, weights) if return_weights else attended


class ProtoHead(nn.Module):
    """1x1 projection of [attended features | similarity map] to class logits."""

    def __init__(self, embed_dim: int, num_prototypes_total: int, num_classes: int) -> None:
        super().__init__()
        self.proj = nn.Linear(embed_dim + num_prototypes_total, num_classes)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, attended: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
        if attended.shape[0] != sim.shape[0]:
            raise ShapeError("Attended features and similarity map are not spatially aligned")
        return self.proj(torch.cat([attended, sim], dim=-1))


class ProtoPrediction(NamedTuple):
    logits: torch.Tensor
    probabilities: torch.Tensor
    mask: torch.Tensor


def binarize(probabilities: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Foreground probability > threshold for two classes, argmax otherwise."""
    if probabilities.shape[-1] == 2:
        return (probabilities[..., 1] > threshold).long()
    return probabilities.argmax(dim=-1)


def proto_head(
    attended: torch.Tensor,
    sim: torch.Tensor,
    head: ProtoHead,
    threshold: float = 0.5,
) -> ProtoPrediction:
    """Per-pixel class probabilities and the binarized mask."""
    logits = head(attended, sim)
    probabilities = torch.softmax(logits, dim=-1)
    return ProtoPrediction(logits, probabilities, binarize(probabilities, threshold))


def flatten_pixels(maps: torch.Tensor) -> torch.Tensor:
    """B x M x H x W -> (B * H * W) x M."""
    return maps.permute(0, 2, 3, 1).reshape(-1, maps.shape[1])


def unflatten_pixels(rows: torch.Tensor, batch: int, height: int, width: int) -> torch.Tensor:
    """(B * H * W) x M -> B x M x H x W."""
    return rows.reshape(batch, height, width, -1).permute(0, 3, 1, 2)


class BranchOutput(NamedTuple):
    sim: torch.Tensor
    logits: torch.Tensor


def prototype_logits(
    embeddings: torch.Tensor,
    prototypes: "PrototypeBank | torch.Tensor",
    head: ProtoHead,
    mode: SimilarityMode | None = None,
) -> BranchOutput:
    """
    Run similarity, fusion and the prototype head over B x M x H x W embeddings.

    Returns the (B * H * W) x CK similarity matrix and B x C x H x W logits.
    """
    batch, _, height, width = embeddings.shape
    pixels = flatten_pixels(embeddings)
    sim = similarity(pixels, prototypes, mode)
    attended = fuse(pixels, prototypes)
    logits = head(attended, sim)
    return BranchOutput(sim, unflatten_pixels(logits, batch, height, width))
