"""
Textual prototypes.

Each class has K description strings. A text encoder embeds them, L learnable
cooperative tokens are averaged into each embedding, and a learned projection maps the
result into the visual embedding space so the prototype pipeline can score pixels
against it.
"""

import hashlib
import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from mpamatch.exceptions import ConfigError, ShapeError
from mpamatch.models import ClassPromptSet, PromptTag, SimilarityMode, TextConfig

logger = logging.getLogger(__name__)


def load_prompt_sets(
    root: str | Path,
    tag: PromptTag,
    class_names: Sequence[str],
    num_prototypes: int,
) -> tuple[list[ClassPromptSet], dict[str, str]]:
    """
    Read ``<root>/<tag>/<class_name>.txt`` for every class.

    Returns:
        The prompt sets in class order and the SHA-256 of every file, keyed by path.

    Raises:
        ConfigError: If a file is missing or does not hold exactly K non-empty lines
    """
    prompt_sets: list[ClassPromptSet] = []
    hashes: dict[str, str] = {}
    for name in class_names:
        path = Path(root) / tag / f"{name}.txt"
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise ConfigError(f"Cannot read prompt file {path}: {e}") from e
        lines = [line.strip() for line in raw.decode("utf-8").splitlines() if line.strip()]
        if len(lines) != num_prototypes:
            raise ConfigError(f"{path} has {len(lines)} descriptions, expected K={num_prototypes}")
        hashes[str(path)] = hashlib.sha256(raw).hexdigest()
        prompt_sets.append(ClassPromptSet(class_name=name, descriptions=lines, tag=tag))
    return prompt_sets, hashes


class TextEncoderAdapter(ABC):
    """Maps strings to d-dimensional embeddings."""

    dim: int

    @abstractmethod
    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        """Return a len(texts) x d tensor."""


class HashTextEncoder(TextEncoderAdapter):
    """
    Deterministic offline stub: the SHA-256 of (seed, text) seeds a generator that draws
    a Gaussian vector, normalized to unit length.
    """

    def __init__(self, dim: int, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
            generator = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
            rows.append(torch.randn(self.dim, generator=generator, dtype=torch.float64))
        return F.normalize(torch.stack(rows), dim=-1).to(torch.float32)


class ExternalTextEncoder(TextEncoderAdapter):
    """Text tower of a local CLIP-family checkpoint loaded through transformers."""

    def __init__(self, weights_path: str | Path) -> None:
        try:
            from transformers import AutoTokenizer, CLIPModel
        except ImportError as e:
            raise ConfigError("external text encoder requires transformers (pip install mpamatch[external])") from e
        path = Path(weights_path)
        if not path.exists():
            raise ConfigError(f"Text encoder weights not found: {path}")
        self.tokenizer = AutoTokenizer.from_pretrained(path)
        self.model = CLIPModel.from_pretrained(path).eval()
        self.dim = int(self.model.config.projection_dim)
        logger.info("Loaded text encoder from %s (d=%d)", path, self.dim)

    @torch.no_grad()
    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        inputs = self.tokenizer(list(texts), padding=True, truncation=True, return_tensors="pt")
        return self.model.get_text_features(**inputs).float()


def build_text_encoder(config: TextConfig, seed: int = 0) -> TextEncoderAdapter:
    if config.encoder == "external":
        return ExternalTextEncoder(config.weights_path or "")
    return HashTextEncoder(config.text_dim, seed)


def embed_descriptions(prompts: Sequence[ClassPromptSet], encoder: TextEncoderAdapter) -> torch.Tensor:
    """
    Embed every description into a unit-norm C x K x d tensor.

    Raises:
        ConfigError: If the adapter fails or class prompt counts differ
    """
    counts = {len(p.descriptions) for p in prompts}
    if len(counts) != 1:
        raise ConfigError(f"Every class needs the same number of descriptions, got {sorted(counts)}")
    k = counts.pop()
    texts = [d for p in prompts for d in p.descriptions]
    try:
        embedded = encoder.encode(texts)
    except Exception as e:  # noqa: BLE001
        raise ConfigError(f"Text encoder failed: {e}") from e
    if embedded.shape[0] != len(texts):
        raise ConfigError(f"Text encoder returned {embedded.shape[0]} rows for {len(texts)} texts")
    return F.normalize(embedded.float(), dim=-1).reshape(len(prompts), k, -1)


def fuse_tokens(base: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean of each base embedding and its L cooperative tokens: C x K x d."""
    if tokens.shape[:2] != base.shape[:2] or tokens.shape[-1] != base.shape[-1]:
        raise ShapeError(
            f"Tokens {tuple(tokens.shape)} do not match base embeddings {tuple(base.shape)}"
        )
    return torch.cat([base.unsqueeze(2), tokens], dim=2).mean(dim=2)


def project_text(
    text_prototypes: torch.Tensor,
    projection: nn.Linear,
    normalize: bool = True,
) -> torch.Tensor:
    """Map C x K x d text prototypes into the C x K x M visual prototype space."""
    if text_prototypes.shape[-1] != projection.in_features:
        raise ShapeError(
            f"Text width {text_prototypes.shape[-1]} does not match projection input {projection.in_features}"
        )
    out = projection(text_prototypes)
    return F.normalize(out, dim=-1) if normalize else out


class TextPrototypes(nn.Module):
    """Frozen (or trainable) description embeddings, cooperative tokens and projection."""

    def __init__(
        self,
        base: torch.Tensor,
        embed_dim: int,
        coop_tokens: int = 1,
        freeze_base: bool = True,
        projection_init: str = "trunc_normal",
        similarity: SimilarityMode = "cosine",
        seed: int = 0,
    ) -> None:
        super().__init__()
        num_classes, k, dim = base.shape
        self.similarity = similarity
        if freeze_base:
            self.register_buffer("base", base.detach().clone())
        else:
            self.base = nn.Parameter(base.detach().clone())

        generator = torch.Generator().manual_seed(seed)
        self.tokens = nn.Parameter(0.02 * torch.randn(num_classes, k, coop_tokens, dim, generator=generator))
        self.projection = nn.Linear(dim, embed_dim, bias=False)
        if projection_init == "identity":
            if dim != embed_dim:
                raise ShapeError("identity projection requires text_dim == embed_dim")
            with torch.no_grad():
                self.projection.weight.copy_(torch.eye(dim))
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                nn.init.trunc_normal_(self.projection.weight, std=0.02)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[2]

    def fused(self) -> torch.Tensor:
        return fuse_tokens(self.base, self.tokens)

    def forward(self) -> torch.Tensor:
        return project_text(self.fused(), self.projection, normalize=self.similarity == "cosine")
