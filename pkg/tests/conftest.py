"""
Pytest configuration and fixtures for testing.
"""

from pathlib import Path

import pytest
import torch

from mpamatch.datasets import make_synthetic
from mpamatch.models import DecoderSpec, EncoderSpec, RunConfig, SyntheticSpec

PROMPTS = {
    "background": [
        "loose fibrous stroma",
        "lamina propria with scattered lymphocytes",
        "empty slide space",
        "smooth muscle bundles",
    ],
    "foreground": [
        "glandular epithelium",
        "crypts lined by columnar cells",
        "irregular glands with crowded nuclei",
        "lumen ringed by epithelium",
    ],
    "extra": [
        "necrotic debris",
        "mucin pool",
        "haemorrhage",
        "cribriform nest",
    ],
}


def write_prompts(root: Path, tag: str = "P-nonsim", k: int = 4, classes=("background", "foreground")) -> Path:
    directory = root / tag
    directory.mkdir(parents=True, exist_ok=True)
    for name in classes:
        (directory / f"{name}.txt").write_text("\n".join(PROMPTS[name][:k]) + "\n", encoding="utf-8")
    return root


@pytest.fixture
def tiny_encoder_spec():
    """16 px input, 4 px patches -> 4 x 4 token grid."""
    return EncoderSpec(input_size=16, patch_size=4, token_dim=16, depth=1, num_heads=2)


@pytest.fixture
def tiny_decoder_spec():
    """Two x2 blocks take the 4 x 4 grid to 16 x 16."""
    return DecoderSpec(reduced_dim=16, block_channels=[16, 8], num_classes=2)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def prompt_root(tmp_path):
    """Prompt files for every tag with K=4 descriptions per class."""
    root = tmp_path / "prompts"
    for tag in ("P-nonsim", "P-simL", "P-simLD", "T-nonsim"):
        write_prompts(root, tag)
    return root


@pytest.fixture
def synthetic_root(tmp_path):
    """Ten 16 x 16 two-class ellipse images."""
    root = tmp_path / "synth"
    make_synthetic(SyntheticSpec(num_images=10, size=16, num_classes=2, seed=7), root)
    return root


@pytest.fixture
def synthetic_manifest(synthetic_root):
    from mpamatch.datasets import load_manifest

    return load_manifest(synthetic_root / "manifest.json")


@pytest.fixture
def desk_config(tmp_path, prompt_root, synthetic_root):
    """Small run over the synthetic dataset; a few seconds per epoch on CPU."""
    return RunConfig.from_dict(
        {
            "seed": 0,
            "epochs": 2,
            "output_dir": str(tmp_path / "run"),
            "progress": False,
            "model": {
                "encoder": {"input_size": 16, "patch_size": 4, "token_dim": 16, "depth": 1, "num_heads": 2},
                "decoder": {"reduced_dim": 16, "block_channels": [16, 8], "num_classes": 2},
                "proto": {"num_prototypes": 4, "embed_dim": 8, "warmup_epochs": 1, "init_pixels_per_class": 200},
                "text": {"prompt_root": str(prompt_root), "coop_tokens": 1, "text_dim": 8},
            },
            "augment": {"cutmix_prob": 1.0},
            "data": {
                "manifest": str(synthetic_root / "manifest.json"),
                "labeled_fraction": 0.5,
                "prefetch": 0,
            },
        }
    )
