"""
Encoder-decoder segmentation network with a pluggable patch-token encoder.

The encoder turns a square RGB image into a row-major sequence of patch tokens, the tokens
are reshaped into a grid, reduced by a 3x3 convolution and decoded by a ladder of x2
upsampling blocks into a full-resolution feature map and per-class logits.
"""

import logging
import math
import random
from abc import ABC, abstractmethod
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mpamatch.augment import feature_perturb
from mpamatch.exceptions import ConfigError, ShapeError, ValidationError
from mpamatch.models import DecoderSpec, EncoderSpec

logger = logging.getLogger(__name__)


def set_seed(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal projections, zero biases, unit norms."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _num_groups(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


class BaseEncoder(nn.Module, ABC):
    """Patch-token encoder contract: B x 3 x H x W in, B x T x D row-major patch tokens out."""

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__()
        self.spec = spec

    @abstractmethod
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Encode a batch of images."""


class StandInEncoder(BaseEncoder):
    """Small randomly initialized patch-embedding transformer for offline runs."""

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__(spec)
        dim = spec.token_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=spec.patch_size, stride=spec.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.token_count, dim))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                dim,
                spec.num_heads,
                dim_feedforward=4 * dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(dim)

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)
        for block in self.blocks:
            nn.init.trunc_normal_(block.self_attn.in_proj_weight, std=0.02)
            nn.init.zeros_(block.self_attn.in_proj_bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ExternalAdapterEncoder(BaseEncoder):
    """
    Pretrained ViT loaded from a local state dict through timm.

    Only patch tokens are emitted; class and register tokens are dropped before the
    reshape.
    """

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__(spec)
        try:
            import timm
        except ImportError as e:
            raise ConfigError("external_adapter encoder requires timm (pip install mpamatch[external])") from e

        path = Path(spec.weights_path or "")
        if not path.is_file():
            raise ConfigError(f"Encoder weights not found: {path}")

        try:
            self.backbone = timm.create_model(
                spec.arch,
                pretrained=False,
                num_classes=0,
                img_size=spec.input_size,
                init_values=1e-5,
                dynamic_img_size=True,
            )
        except Exception as e:  # noqa: BLE001
            raise ConfigError(f"Cannot build encoder architecture '{spec.arch}': {e}") from e

        patch = self.backbone.patch_embed.patch_size
        patch = patch[0] if isinstance(patch, (tuple, list)) else patch
        if patch != spec.patch_size or self.backbone.embed_dim != spec.token_dim:
            raise ConfigError(
                f"Adapter declares patch {spec.patch_size}/dim {spec.token_dim}, "
                f"architecture has patch {patch}/dim {self.backbone.embed_dim}"
            )

        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            self.backbone.load_state_dict(state, strict=True)
        except Exception as e:  # noqa: BLE001
            raise ConfigError(f"Cannot load encoder weights from {path}: {e}") from e
        logger.info("Loaded %s encoder weights from %s", spec.arch, path)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.backbone.forward_features(images)
        return tokens[:, self.backbone.num_prefix_tokens :]


def build_encoder(spec: EncoderSpec) -> BaseEncoder:
    """Instantiate the encoder variant named by the spec."""
    if spec.variant == "external_adapter":
        return ExternalAdapterEncoder(spec)
    return StandInEncoder(spec)


def encode(image: torch.Tensor, encoder: BaseEncoder) -> torch.Tensor:
    """
    Encode images into patch tokens.

    Args:
        image: 3 x H x W or B x 3 x H x W tensor with values in [0, 1]
        encoder: Encoder whose spec fixes the expected geometry

    Returns:
        T x D (single image) or B x T x D token tensor

    Raises:
        ShapeError: If the image geometry does not match the encoder spec
        ValidationError: If pixel values are non-finite or outside [0, 1]
    """
    spec = encoder.spec
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ShapeError(f"Expected 3 x H x W images, got shape {tuple(image.shape)}")
    if tuple(batch.shape[-2:]) != (spec.input_size, spec.input_size):
        raise ShapeError(
            f"Image size {tuple(batch.shape[-2:])} does not match input_size {spec.input_size}"
        )
    if not torch.isfinite(batch).all():
        raise ValidationError("Image contains non-finite values")
    if batch.min() < 0 or batch.max() > 1:
        raise ValidationError("Image values must lie in [0, 1]")

    tokens = encoder(batch)
    return tokens[0] if single else tokens


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """
    Reshape a row-major token sequence into a square channel-first grid.

    T x D becomes D x g x g and B x T x D becomes B x D x g x g, with token t at
    row t // g, column t % g.
    """
    count = tokens.shape[-2]
    side = math.isqrt(count)
    if side * side != count:
        raise ShapeError(f"Token count {count} is not a perfect square")
    grid = tokens.transpose(-1, -2)
    return grid.reshape(*grid.shape[:-1], side, side)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    """Inverse of tokens_to_grid."""
    return grid.flatten(-2).transpose(-1, -2)


def _conv_norm_relu(in_channels: int, out_channels: int) -> list[nn.Module]:
    return [
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.GroupNorm(_num_groups(out_channels), out_channels),
        nn.ReLU(inplace=True),
    ]


class UpBlock(nn.Module):
    """Bilinear x2 upsample followed by two 3x3 conv / group-norm / ReLU stages."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv = nn.Sequential(
            *_conv_norm_relu(in_channels, out_channels),
            *_conv_norm_relu(out_channels, out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class Decoder(nn.Module):
    """Channel reduction, upsampling ladder and 1x1 class head."""

    def __init__(self, spec: DecoderSpec, in_channels: int, output_size: int) -> None:
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.output_size = output_size
        self.reduce = nn.Sequential(*_conv_norm_relu(in_channels, spec.reduced_dim))
        ladder = [spec.reduced_dim, *spec.block_channels]
        self.blocks = nn.ModuleList(UpBlock(a, b) for a, b in zip(ladder, ladder[1:]))
        self.head = nn.Conv2d(spec.out_channels, spec.num_classes, kernel_size=1)
        self.apply(init_weights)

    def forward(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if grid.dim() != 4 or grid.shape[1] != self.in_channels:
            raise ShapeError(
                f"Decoder expects {self.in_channels} input channels, got shape {tuple(grid.shape)}"
            )
        x = self.reduce(grid)
        for block in self.blocks:
            x = block(x)
        if tuple(x.shape[-2:]) != (self.output_size, self.output_size):
            x = F.interpolate(
                x, size=(self.output_size, self.output_size), mode="bilinear", align_corners=False
            )
        return x, self.head(x)


def decode(grid: torch.Tensor, decoder: Decoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode a token grid into (full-resolution features, logits)."""
    return decoder(grid)


class SegOutput(NamedTuple):
    """Forward results; the *_fp fields are set when feature perturbation was requested."""

    features: torch.Tensor
    logits: torch.Tensor
    embeddings: torch.Tensor
    logits_fp: torch.Tensor | None = None
    embeddings_fp: torch.Tensor | None = None


class SegmentationModel(nn.Module):
    """Encoder, decoder and the pixel-embedding projection used by the prototype branches."""

    def __init__(self, encoder_spec: EncoderSpec, decoder_spec: DecoderSpec, embed_dim: int) -> None:
        super().__init__()
        self.encoder_spec = encoder_spec
        self.decoder_spec = decoder_spec
        self.encoder = build_encoder(encoder_spec)
        self.decoder = Decoder(decoder_spec, encoder_spec.token_dim, encoder_spec.input_size)
        self.embed = nn.Conv2d(decoder_spec.out_channels, embed_dim, kernel_size=1)
        init_weights(self.embed)

    def forward(
        self,
        images: torch.Tensor,
        fp_rate: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> SegOutput:
        grid = tokens_to_grid(encode(images, self.encoder))
        batch = grid.shape[0]
        if fp_rate > 0:
            grid = torch.cat([grid, feature_perturb(grid, fp_rate, generator)])

        features, logits = self.decoder(grid)
        embeddings = self.embed(features)
        if fp_rate <= 0:
            return SegOutput(features, logits, embeddings)
        return SegOutput(
            features[:batch],
            logits[:batch],
            embeddings[:batch],
            logits[batch:],
            embeddings[batch:],
        )
