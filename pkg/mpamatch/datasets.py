"""
Dataset ingestion, splitting and the synthetic desk-scale generator.

A dataset root holds ``images/*.png`` and ``masks/*.png`` paired by filename stem, plus an
optional ``split.json`` with the official train/test (and unlabeled) lists. Scanning maps
mask pixel values through a palette to class indices and records content hashes so a run
can prove which data it saw.
"""

import hashlib
import json
import logging
import math
from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError
from torch.utils.data import Dataset

from mpamatch.augment import resize_image, resize_mask
from mpamatch.exceptions import DataError, EmptyManifestError, MissingMaskError, PaletteError, SplitError
from mpamatch.models import DatasetManifest, ManifestEntry, SyntheticSpec

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
BINARY_PALETTE: dict[int, int] = {0: 0, 255: 1}
MANIFEST_FILENAME = "manifest.json"


class DatasetPreset(BaseModel):
    """
    Palette, class names and official split sizes of a public dataset.

    nonzero_class covers annotations that number each object 1..N instead of using the
    palette value.
    """

    name: str
    class_names: list[str]
    palette: dict[int, int] = Field(default_factory=lambda: dict(BINARY_PALETTE))
    nonzero_class: int | None = None
    train_count: int
    test_count: int


DATASET_PRESETS: dict[str, DatasetPreset] = {
    "glas": DatasetPreset(
        name="GlaS", class_names=["background", "gland"], nonzero_class=1, train_count=148, test_count=17
    ),
    "ebhi-gland": DatasetPreset(
        name="EBHI-SEG-GLAND", class_names=["background", "gland"], train_count=1258, test_count=141
    ),
    "ebhi-cancer": DatasetPreset(
        name="EBHI-SEG-CANCER", class_names=["background", "cancer"], train_count=715, test_count=80
    ),
    "kpi": DatasetPreset(name="KPI", class_names=["background", "glomerulus"], train_count=774, test_count=87),
}


def _sha256(path: Path) -> str:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def _read_mask_values(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16"):
                img = img.convert("L")
            return np.asarray(img).astype(np.int64)
    except OSError as e:
        raise DataError(f"Unreadable mask {path}: {e}") from e


def _list_images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_split_file(path: Path) -> dict[str, str]:
    """Map stem -> split from split.json ({"train": [...], "test": [...], "unlabeled": [...]})."""
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read split file {path}: {e}") from e
    names = {"train": "train", "test": "test", "unlabeled": "train_unlabeled"}
    assigned: dict[str, str] = {}
    for key, stems in data.items():
        if key not in names:
            raise DataError(f"Unknown split '{key}' in {path}")
        for stem in stems:
            if stem in assigned:
                raise DataError(f"'{stem}' appears in more than one split of {path}")
            assigned[stem] = names[key]
    return assigned


def scan(
    root: str | Path,
    palette: dict[int, int] | None = None,
    name: str | None = None,
    nonzero_class: int | None = None,
) -> DatasetManifest:
    """
    Pair images with masks and build a manifest.

    Args:
        root: Dataset root with images/ and masks/
        palette: Mask pixel value -> class index (defaults to {0: 0, 255: 1})
        name: Dataset name (defaults to the root directory name)
        nonzero_class: Class for nonzero mask values outside the palette (None rejects them)

    Raises:
        EmptyManifestError: If there are no images
        MissingMaskError: If an image not flagged unlabeled has no mask
        PaletteError: If mask values fall outside the palette; lists every offender
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Dataset root {root} does not exist")
    palette = dict(BINARY_PALETTE if palette is None else palette)
    images = _list_images(root / "images")
    if not images:
        raise EmptyManifestError(f"No images found under {root / 'images'}")
    masks = _list_images(root / "masks")

    split_path = root / "split.json"
    predefined = _read_split_file(split_path) if split_path.exists() else None
    if predefined is not None:
        unlisted = sorted(set(images) - set(predefined))
        if unlisted:
            raise DataError(f"{len(unlisted)} images are missing from {split_path}: {unlisted[:5]}")

    entries: list[ManifestEntry] = []
    offenders: dict[str, list[int]] = {}
    for stem in sorted(images):
        split = predefined[stem] if predefined is not None else "train"
        image = images[stem]
        mask = masks.get(stem)
        unlabeled_only = split == "train_unlabeled" or mask is None
        if mask is None and split != "train_unlabeled":
            raise MissingMaskError(f"No mask for labeled image {image.name}")

        classes: list[int] = []
        if mask is not None:
            values = np.unique(_read_mask_values(mask)).tolist()
            unknown = [v for v in values if v not in palette and (nonzero_class is None or v <= 0)]
            if unknown:
                offenders[mask.name] = unknown
                continue
            classes = sorted({palette[v] if v in palette else int(nonzero_class or 0) for v in values})

        entries.append(
            ManifestEntry(
                id=stem,
                image=image.relative_to(root).as_posix(),
                mask=mask.relative_to(root).as_posix() if mask is not None else None,
                split=split,
                image_hash=_sha256(image),
                mask_hash=_sha256(mask) if mask is not None else None,
                classes=classes,
                unlabeled_only=unlabeled_only,
            )
        )

    if offenders:
        listing = ", ".join(f"{f}: {v}" for f, v in sorted(offenders.items()))
        raise PaletteError(f"Mask values outside palette {sorted(palette)}: {listing}", offenders)

    manifest = DatasetManifest(
        name=name or root.name,
        root=str(root),
        palette=palette,
        nonzero_class=nonzero_class,
        entries=entries,
        predefined_split=predefined is not None,
    )
    logger.info("Scanned %s: %d entries %s", manifest.name, len(entries), manifest.counts())
    return manifest


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(
    manifest: DatasetManifest,
    labeled_fraction: float = 7 / 9,
    seed: int = 0,
    test_fraction: float = 0.1,
) -> DatasetManifest:
    """
    Assign train_labeled / train_unlabeled / test.

    A predefined split keeps its test set and unlabeled-only entries; otherwise a seeded
    permutation holds out round(n * test_fraction) images for test. The labeled pool first
    takes one image per class (stratification), then fills to round(n_train * labeled_fraction).

    Raises:
        SplitError: If a class cannot be represented in the labeled pool
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise SplitError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    entries = [e.model_copy() for e in manifest.entries]
    assignment: dict[str, str] = {}

    if manifest.predefined_split:
        test_ids = {e.id for e in entries if e.split == "test"}
    else:
        candidates = [e.id for e in entries if not e.unlabeled_only]
        n_test = _round_half_up(len(candidates) * test_fraction)
        order = rng.permutation(len(candidates))
        test_ids = {candidates[i] for i in order[:n_test]}

    pool = [e for e in entries if e.id not in test_ids and not e.unlabeled_only]
    if not pool:
        raise SplitError("No labeled training images remain after the test hold-out")
    n_labeled = max(1, _round_half_up(len(pool) * labeled_fraction))
    order = [pool[i] for i in rng.permutation(len(pool))]

    labeled: list[str] = []
    for c in range(manifest.num_classes):
        if any(c in e.classes for e in pool if e.id in labeled):
            continue
        carrier = next((e for e in order if c in e.classes and e.id not in labeled), None)
        if carrier is None:
            raise SplitError(f"Class {c} does not occur in any training mask")
        labeled.append(carrier.id)
    if len(labeled) > n_labeled:
        raise SplitError(
            f"Stratification needs {len(labeled)} labeled images but the fraction allows {n_labeled}"
        )
    for e in order:
        if len(labeled) >= n_labeled:
            break
        if e.id not in labeled:
            labeled.append(e.id)

    labeled_set = set(labeled)
    for e in entries:
        if e.id in test_ids:
            assignment[e.id] = "test"
        elif e.id in labeled_set:
            assignment[e.id] = "train_labeled"
        else:
            assignment[e.id] = "train_unlabeled"
        e.split = assignment[e.id]

    result = manifest.model_copy(update={"entries": entries})
    logger.info("Split %s (seed %d): %s", manifest.name, seed, result.counts())
    return result


_BASE_COLORS = np.array(
    [
        [0.93, 0.82, 0.89],
        [0.45, 0.20, 0.55],
        [0.85, 0.45, 0.60],
        [0.30, 0.35, 0.70],
        [0.60, 0.15, 0.25],
        [0.95, 0.65, 0.80],
    ]
)


def _class_colors(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    if num_classes <= len(_BASE_COLORS):
        return _BASE_COLORS[:num_classes]
    extra = rng.uniform(0.1, 0.9, size=(num_classes - len(_BASE_COLORS), 3))
    return np.concatenate([_BASE_COLORS, extra])


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.1, 0.25, size=2) * size
    theta = rng.uniform(0.0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _blob(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    region = np.zeros((size, size), dtype=bool)
    for _ in range(3):
        oy, ox = rng.normal(0.0, 0.06, size=2) * size
        r = rng.uniform(0.06, 0.12) * size
        region |= (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= r**2
    return region


def make_synthetic(spec: SyntheticSpec, root: str | Path) -> DatasetManifest:
    """
    Write a synthetic dataset of coloured shapes with exact masks and return its manifest.

    Masks store class indices directly (identity palette). Image i always contains class
    1 + i mod (C - 1), drawn last so it stays visible, and the image corners always stay
    background, so every class appears across the set.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    colors = _class_colors(spec.num_classes, rng)
    draw = _ellipse if spec.shape_family == "ellipses" else _blob

    for i in range(spec.num_images):
        mask = np.zeros((spec.size, spec.size), dtype=np.uint8)
        guaranteed = 1 + i % (spec.num_classes - 1)
        n_extra = int(rng.integers(0, 3))
        classes = [int(c) for c in rng.integers(1, spec.num_classes, size=n_extra)] + [guaranteed]
        for cls in classes:
            mask[draw(spec.size, rng)] = cls

        image = colors[mask]
        if spec.noise > 0:
            image = image + rng.normal(0.0, spec.noise, size=image.shape)
        pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)

        stem = f"synth_{i:04d}"
        Image.fromarray(pixels).save(root / "images" / f"{stem}.png")
        Image.fromarray(mask).save(root / "masks" / f"{stem}.png")

    palette = {c: c for c in range(spec.num_classes)}
    manifest = scan(root, palette, name=f"synthetic-{spec.shape_family}-{spec.seed}")
    save_manifest(manifest, root / MANIFEST_FILENAME)
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e
    except PydanticValidationError as e:
        raise DataError(f"Malformed manifest {path}: {e}") from e


def load_image(path: str | Path) -> torch.Tensor:
    """Decode to a 3 x H x W float tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"Unreadable image {path}: {e}") from e
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def load_mask(path: str | Path, palette: dict[int, int], nonzero_class: int | None = None) -> torch.Tensor:
    """
    Decode to an H x W int64 class-index tensor through the palette.

    With nonzero_class, every nonzero value missing from the palette maps to that class
    (instance-numbered annotations such as GlaS glands 1..N).
    """
    values = _read_mask_values(Path(path))
    lookup = np.full(max(int(values.max()), max(palette)) + 1, -1, dtype=np.int64)
    if nonzero_class is not None:
        lookup[1:] = nonzero_class
    for value, cls in palette.items():
        lookup[value] = cls
    mapped = lookup[values]
    if (mapped < 0).any():
        unknown = sorted(set(values[mapped < 0].tolist()))
        raise PaletteError(f"Mask {path} has values outside palette: {unknown}", {str(path): unknown})
    return torch.from_numpy(mapped)


class SegmentationSample(NamedTuple):
    image: torch.Tensor
    mask: torch.Tensor | None
    id: str


@dataclass
class SegmentationBatch:
    """Stacked samples of one stream."""

    images: torch.Tensor
    masks: torch.Tensor | None
    ids: list[str]
    labeled: bool

    @classmethod
    def collate(cls, samples: Sequence[SegmentationSample], labeled: bool) -> "SegmentationBatch":
        if not samples:
            raise DataError("Cannot collate an empty batch")
        images = torch.stack([s.image for s in samples])
        masks = None
        if labeled:
            if any(s.mask is None for s in samples):
                raise MissingMaskError("Labeled batch contains a sample without a mask")
            masks = torch.stack([s.mask for s in samples])
        return cls(images, masks, [s.id for s in samples], labeled)


class SegmentationDataset(Dataset):
    """
    Images (and masks) of one or more splits, resized to the model input size.

    Decoded samples are kept in a least-recently-used cache of at most cache_size entries;
    cache_size=0 decodes on every access.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str | Sequence[str],
        input_size: int,
        cache_size: int = 256,
    ) -> None:
        if cache_size < 0:
            raise DataError(f"cache_size must be non-negative, got {cache_size}")
        splits = (split,) if isinstance(split, str) else tuple(split)
        self.manifest = manifest
        self.entries = manifest.by_split(*splits)
        self.input_size = input_size
        self.root = Path(manifest.root)
        self.cache_size = cache_size
        self._cache: OrderedDict[int, SegmentationSample] = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> SegmentationSample:
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        entry = self.entries[index]
        image = resize_image(load_image(self.root / entry.image), self.input_size)
        mask = None
        if entry.mask is not None:
            labels = load_mask(self.root / entry.mask, self.manifest.palette, self.manifest.nonzero_class)
            mask = resize_mask(labels, self.input_size)
        sample = SegmentationSample(image, mask, entry.id)
        if self.cache_size:
            self._cache[index] = sample
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return sample

    def source_size(self, index: int) -> tuple[int, int]:
        """Original (height, width) of an entry's image."""
        with Image.open(self.root / self.entries[index].image) as img:
            return img.height, img.width
