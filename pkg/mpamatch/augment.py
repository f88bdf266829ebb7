"""
Weak/strong image augmentation and feature-level perturbation.

Every random draw comes from an explicit seed so that a view can be regenerated from
its AugmentationRecord. Images are channel-first float tensors in [0, 1]; masks are
H x W integer tensors.
"""

import math
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from mpamatch.exceptions import ValidationError
from mpamatch.models import AugmentationRecord, AugmentConfig, CutMixRecord, GeometricTransform


def make_generator(seed: int | torch.Generator | None) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    generator = torch.Generator()
    generator.manual_seed(0 if seed is None else int(seed))
    return generator


def resize_image(image: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a C x H x W image, clamped to [0, 1]."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(image.shape[-2:]) == size:
        return image
    out = F.interpolate(image.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]
    return out.clamp(0.0, 1.0)


def resize_mask(mask: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of an H x W index mask; labels never interpolate."""
    size = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(mask.shape[-2:]) == size:
        return mask
    out = F.interpolate(mask[None, None].float(), size=size, mode="nearest")[0, 0]
    return out.to(mask.dtype)


def apply_transform(tensor: torch.Tensor, transform: GeometricTransform, is_mask: bool = False) -> torch.Tensor:
    """Resize to the target size, then flip horizontally if the descriptor says so."""
    out = resize_mask(tensor, transform.size) if is_mask else resize_image(tensor, transform.size)
    return out.flip(-1) if transform.flip else out


def invert_transform(tensor: torch.Tensor, transform: GeometricTransform, is_mask: bool = False) -> torch.Tensor:
    """Map a view (or a prediction on it) back onto the source pixel grid."""
    out = tensor.flip(-1) if transform.flip else tensor
    size = transform.source_size
    if is_mask or not torch.is_floating_point(out):
        return resize_mask(out, size)
    if tuple(out.shape[-2:]) == tuple(size):
        return out
    return F.interpolate(out.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]


def weak_augment(
    image: torch.Tensor,
    size: int,
    seed: int | torch.Generator,
    flip_prob: float = 0.5,
) -> tuple[torch.Tensor, GeometricTransform]:
    """
    Resize to the input size and flip horizontally with probability flip_prob.

    Returns:
        The view and the descriptor that maps pseudo-labels back to the source image.
    """
    generator = make_generator(seed)
    flip = bool(torch.rand((), generator=generator).item() < flip_prob)
    transform = GeometricTransform(flip=flip, source_size=tuple(image.shape[-2:]), size=size)
    return apply_transform(image, transform), transform


def color_jitter(
    image: torch.Tensor,
    seed: int | torch.Generator,
    jitter_range: tuple[float, float] = (0.6, 1.4),
    prob: float = 0.8,
) -> tuple[torch.Tensor, list[float] | None]:
    """Brightness, contrast and saturation jitter; returns the factors, or None if skipped."""
    generator = make_generator(seed)
    draws = torch.rand(4, generator=generator).tolist()
    if draws[0] >= prob:
        return image, None
    low, high = jitter_range
    brightness, contrast, saturation = (low + (high - low) * u for u in draws[1:])
    out = TF.adjust_brightness(image, brightness)
    out = TF.adjust_contrast(out, contrast)
    out = TF.adjust_saturation(out, saturation)
    return out.clamp(0.0, 1.0), [brightness, contrast, saturation]


def sample_cutmix_box(
    height: int,
    width: int,
    seed: int | torch.Generator,
    area_range: tuple[float, float] = (0.1, 0.5),
    aspect_range: tuple[float, float] = (0.5, 2.0),
    prob: float = 1.0,
    partner_id: str | None = None,
) -> CutMixRecord:
    """Draw a box whose area fraction and height/width ratio are uniform in the given ranges."""
    generator = make_generator(seed)
    draws = torch.rand(5, generator=generator).tolist()
    if draws[0] >= prob:
        return CutMixRecord(partner_id=partner_id)

    area = (area_range[0] + (area_range[1] - area_range[0]) * draws[1]) * height * width
    aspect = aspect_range[0] + (aspect_range[1] - aspect_range[0]) * draws[2]
    box_h = min(height, int(round(math.sqrt(area * aspect))))
    box_w = min(width, int(round(math.sqrt(area / aspect))))
    y0 = int(draws[3] * (height - box_h + 1)) if box_h < height else 0
    x0 = int(draws[4] * (width - box_w + 1)) if box_w < width else 0
    y0, x0 = min(y0, height - box_h), min(x0, width - box_w)
    return CutMixRecord(y0=y0, x0=x0, y1=y0 + box_h, x1=x0 + box_w, partner_id=partner_id)


def cutmix_mask(record: CutMixRecord, height: int, width: int) -> torch.Tensor:
    """Boolean H x W mask, True inside the box."""
    mask = torch.zeros(height, width, dtype=torch.bool)
    if record.area > 0:
        mask[record.y0 : record.y1, record.x0 : record.x1] = True
    return mask


def mix_labels(source: torch.Tensor, partner: torch.Tensor, record: CutMixRecord) -> torch.Tensor:
    """Take the partner inside the box and the source outside; works for masks and C x H x W maps."""
    mask = cutmix_mask(record, source.shape[-2], source.shape[-1]).to(source.device)
    return torch.where(mask, partner, source)


class StrongView(NamedTuple):
    image: torch.Tensor
    cutmix: CutMixRecord
    jitter: list[float] | None


def strong_augment(
    image: torch.Tensor,
    partner_image: torch.Tensor,
    seed: int | torch.Generator,
    config: AugmentConfig | None = None,
    partner_id: str | None = None,
) -> StrongView:
    """
    Colour jitter followed by CutMix with a partner image of the same size.

    The partner pixels are pasted unjittered; the record keeps the box so pseudo-labels
    can be mixed the same way.
    """
    config = config or AugmentConfig()
    if partner_image.shape != image.shape:
        raise ValidationError(
            f"CutMix partner shape {tuple(partner_image.shape)} differs from {tuple(image.shape)}"
        )
    generator = make_generator(seed)
    jittered, factors = color_jitter(image, generator, config.jitter_range, config.jitter_prob)
    record = sample_cutmix_box(
        image.shape[-2],
        image.shape[-1],
        generator,
        config.cutmix_area,
        config.cutmix_aspect,
        config.cutmix_prob,
        partner_id,
    )
    return StrongView(mix_labels(jittered, partner_image, record), record, factors)


def feature_perturb(
    features: torch.Tensor,
    rate: float,
    seed: int | torch.Generator | None = None,
) -> torch.Tensor:
    """
    Channel dropout: zero each (sample, channel) map with probability rate and scale the
    survivors by 1 / (1 - rate).
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"Dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return features
    generator = None if seed is None else make_generator(seed)
    shape = tuple(features.shape[:2]) + (1,) * (features.dim() - 2)
    keep = (torch.rand(shape, generator=generator) >= rate).to(features)
    return features * keep / (1.0 - rate)


class AugmentedViews(NamedTuple):
    """Weak view, two strong views and the partner's weak view of one unlabeled sample."""

    weak: torch.Tensor
    strong1: torch.Tensor
    strong2: torch.Tensor
    partner_weak: torch.Tensor
    record: AugmentationRecord


def make_unlabeled_views(
    image: torch.Tensor,
    partner_image: torch.Tensor,
    size: int,
    seed: int,
    config: AugmentConfig | None = None,
    sample_id: str = "",
    partner_id: str | None = None,
) -> AugmentedViews:
    """
    Build the dual-stream views of an unlabeled image.

    Strong views are derived from the weak view, so they share its geometry and the weak
    pseudo-label aligns with them without re-warping.
    """
    config = config or AugmentConfig()
    generator = make_generator(seed)
    weak, transform = weak_augment(image, size, generator, config.flip_prob)
    partner_weak, _ = weak_augment(partner_image, size, generator, config.flip_prob)
    strong1 = strong_augment(weak, partner_weak, generator, config, partner_id)
    strong2 = strong_augment(weak, partner_weak, generator, config, partner_id)
    record = AugmentationRecord(
        sample_id=sample_id,
        seed=seed,
        weak=transform,
        jitter=[strong1.jitter, strong2.jitter],
        cutmix=[strong1.cutmix, strong2.cutmix],
    )
    return AugmentedViews(weak, strong1.image, strong2.image, partner_weak, record)


def write_records(path: str | Path, records: list[AugmentationRecord]) -> None:
    """Append augmentation records as JSON lines."""
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
