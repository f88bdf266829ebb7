"""
Tests for augmentation and feature perturbation.
"""

import json

import pytest
import torch

from mpamatch.augment import (
    apply_transform,
    color_jitter,
    cutmix_mask,
    feature_perturb,
    invert_transform,
    make_unlabeled_views,
    mix_labels,
    resize_mask,
    sample_cutmix_box,
    strong_augment,
    weak_augment,
    write_records,
)
from mpamatch.exceptions import ValidationError
from mpamatch.models import AugmentConfig, CutMixRecord, GeometricTransform


class TestWeakAugment:
    """Tests for weak_augment and its inverse."""

    def test_deterministic(self):
        """Test the same seed gives the same view."""
        image = torch.rand(3, 20, 24)
        a, ta = weak_augment(image, 16, seed=3)
        b, tb = weak_augment(image, 16, seed=3)
        assert torch.equal(a, b)
        assert ta == tb
        assert a.shape == (3, 16, 16)
        assert ta.source_size == (20, 24)

    def test_flip_probabilities(self):
        """Test flip_prob 0 never flips and 1 always flips."""
        image = torch.rand(3, 8, 8)
        assert not weak_augment(image, 8, seed=1, flip_prob=0.0)[1].flip
        view, transform = weak_augment(image, 8, seed=1, flip_prob=1.0)
        assert transform.flip
        assert torch.equal(view, image.flip(-1))

    @pytest.mark.parametrize("flip", [False, True])
    def test_mask_round_trip(self, flip):
        """Test a mask warped into the view and back is unchanged."""
        mask = torch.randint(0, 3, (16, 16))
        transform = GeometricTransform(flip=flip, source_size=(16, 16), size=32)
        view = apply_transform(mask, transform, is_mask=True)
        assert view.shape == (32, 32)
        assert torch.equal(invert_transform(view, transform, is_mask=True), mask)

    def test_nearest_keeps_labels(self):
        """Test resizing a mask never invents new label values."""
        mask = torch.randint(0, 2, (13, 17))
        assert set(resize_mask(mask, 16).unique().tolist()) <= {0, 1}

    def test_probability_map_inverse(self):
        """Test float maps are resampled back to the source size."""
        transform = GeometricTransform(flip=True, source_size=(10, 12), size=16)
        probs = torch.rand(2, 16, 16)
        assert invert_transform(probs, transform).shape == (2, 10, 12)


class TestColorJitter:
    """Tests for color_jitter."""

    def test_skipped(self):
        """Test prob 0 returns the image untouched."""
        image = torch.rand(3, 8, 8)
        out, factors = color_jitter(image, seed=0, prob=0.0)
        assert factors is None
        assert torch.equal(out, image)

    def test_factors_in_range(self):
        """Test drawn factors lie within the range and output within [0, 1]."""
        for seed in range(20):
            out, factors = color_jitter(torch.rand(3, 8, 8), seed=seed, jitter_range=(0.6, 1.4), prob=1.0)
            assert len(factors) == 3
            assert all(0.6 <= f <= 1.4 for f in factors)
            assert out.min() >= 0 and out.max() <= 1


class TestCutMix:
    """Tests for CutMix boxes and label mixing."""

    @pytest.mark.parametrize("seed", range(25))
    def test_box_within_bounds(self, seed):
        """Test boxes stay inside the image with the configured area."""
        record = sample_cutmix_box(64, 64, seed, area_range=(0.1, 0.5), aspect_range=(0.5, 2.0))
        assert 0 <= record.y0 < record.y1 <= 64
        assert 0 <= record.x0 < record.x1 <= 64
        assert 0.08 <= record.area / (64 * 64) <= 0.52

    def test_skipped_box(self):
        """Test prob 0 gives an empty box."""
        record = sample_cutmix_box(32, 32, 0, prob=0.0, partner_id="p")
        assert record.area == 0
        assert record.partner_id == "p"
        assert not cutmix_mask(record, 32, 32).any()

    def test_mix_labels(self):
        """Test the partner fills the box and the source the rest."""
        record = CutMixRecord(y0=1, x0=2, y1=3, x1=4)
        mixed = mix_labels(torch.zeros(4, 5, dtype=torch.long), torch.ones(4, 5, dtype=torch.long), record)
        assert mixed.sum().item() == 4
        assert mixed[1:3, 2:4].eq(1).all()

    def test_mix_probability_maps(self):
        """Test channel-first maps are mixed over every channel."""
        record = CutMixRecord(y0=0, x0=0, y1=2, x1=2)
        mixed = mix_labels(torch.zeros(3, 4, 4), torch.ones(3, 4, 4), record)
        assert mixed[:, :2, :2].eq(1).all()
        assert mixed.sum().item() == 12

    def test_partner_shape_checked(self):
        """Test the partner must match the image shape."""
        with pytest.raises(ValidationError):
            strong_augment(torch.rand(3, 8, 8), torch.rand(3, 8, 6), seed=0)


class TestFeaturePerturb:
    """Tests for feature_perturb."""

    def test_zero_rate_identity(self):
        """Test rate 0 returns the input."""
        features = torch.randn(2, 4, 3, 3)
        assert feature_perturb(features, 0.0) is features

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_rate_range(self, rate):
        """Test rates outside [0, 1)."""
        with pytest.raises(ValidationError):
            feature_perturb(torch.ones(1, 2, 2, 2), rate)

    def test_whole_channels_dropped_and_scaled(self):
        """Test each channel map is either zeroed or scaled by 1 / (1 - rate)."""
        features = torch.ones(4, 16, 3, 3)
        out = feature_perturb(features, 0.5, seed=2)
        per_channel = out.flatten(2)
        assert torch.all(per_channel.min(-1).values == per_channel.max(-1).values)
        assert set(per_channel[..., 0].unique().tolist()) <= {0.0, 2.0}

    def test_seeded(self):
        """Test the same seed drops the same channels."""
        features = torch.randn(2, 8, 2, 2)
        assert torch.equal(feature_perturb(features, 0.3, seed=9), feature_perturb(features, 0.3, seed=9))


class TestUnlabeledViews:
    """Tests for make_unlabeled_views."""

    def test_deterministic(self):
        """Test views and record regenerate from the seed."""
        image, partner = torch.rand(3, 16, 16), torch.rand(3, 16, 16)
        a = make_unlabeled_views(image, partner, 16, seed=42, sample_id="u0", partner_id="u1")
        b = make_unlabeled_views(image, partner, 16, seed=42, sample_id="u0", partner_id="u1")
        assert torch.equal(a.strong1, b.strong1)
        assert torch.equal(a.strong2, b.strong2)
        assert a.record == b.record
        assert len(a.record.cutmix) == 2
        assert a.record.cutmix[0].partner_id == "u1"

    def test_strong_views_share_weak_geometry(self):
        """Test without jitter a strong view is the weak view outside the box."""
        config = AugmentConfig(jitter_prob=0.0, cutmix_prob=1.0)
        views = make_unlabeled_views(torch.rand(3, 16, 16), torch.rand(3, 16, 16), 16, seed=5, config=config)
        box = cutmix_mask(views.record.cutmix[0], 16, 16)
        assert torch.equal(views.strong1[:, ~box], views.weak[:, ~box])
        assert torch.equal(views.strong1[:, box], views.partner_weak[:, box])
        assert views.record.jitter == [None, None]

    def test_write_records(self, tmp_path):
        """Test records append as JSON lines."""
        views = make_unlabeled_views(torch.rand(3, 8, 8), torch.rand(3, 8, 8), 8, seed=1, sample_id="x")
        path = tmp_path / "augment.jsonl"
        write_records(path, [views.record])
        write_records(path, [views.record])
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["sample_id"] == "x"
