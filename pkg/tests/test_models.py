"""
Tests for Pydantic models.
"""

import pytest
from pydantic import ValidationError as PydanticValidationError

from mpamatch.exceptions import ConfigError
from mpamatch.models import (
    AugmentConfig,
    ClassMetrics,
    DecoderSpec,
    EncoderSpec,
    LossReport,
    LossWeights,
    MetricReport,
    RunConfig,
    SupervisionComparison,
    SweepSpec,
    SyntheticSpec,
)


class TestEncoderSpec:
    """Tests for EncoderSpec geometry validation."""

    def test_default_values(self):
        """Test defaults follow the foundation-model geometry."""
        spec = EncoderSpec()
        assert spec.input_size == 256
        assert spec.patch_size == 16
        assert spec.token_dim == 1024
        assert spec.grid_size == 16
        assert spec.token_count == 256

    def test_indivisible_input_rejected(self):
        """Test input size must be a multiple of the patch size."""
        with pytest.raises(PydanticValidationError, match="not divisible"):
            EncoderSpec(input_size=250, patch_size=16)

    def test_heads_must_divide_width(self):
        """Test attention heads must divide the token width."""
        with pytest.raises(PydanticValidationError, match="num_heads"):
            EncoderSpec(input_size=16, patch_size=4, token_dim=18, num_heads=4)

    def test_external_adapter_requires_weights(self):
        """Test the adapter variant cannot be declared without weights."""
        with pytest.raises(PydanticValidationError, match="weights_path"):
            EncoderSpec(variant="external_adapter")


class TestDecoderSpec:
    """Tests for DecoderSpec."""

    def test_default_ladder(self):
        """Test the default block ladder and output channels."""
        spec = DecoderSpec()
        assert spec.block_channels == [256, 128, 64, 16]
        assert spec.reduced_dim == 512
        assert spec.out_channels == 16

    def test_ladder_must_decrease(self):
        """Test a non-decreasing ladder is rejected."""
        with pytest.raises(PydanticValidationError, match="strictly decreasing"):
            DecoderSpec(block_channels=[64, 64, 16])

    def test_single_class_rejected(self):
        """Test segmentation needs at least two classes."""
        with pytest.raises(PydanticValidationError):
            DecoderSpec(num_classes=1)


class TestLossWeights:
    """Tests for LossWeights."""

    def test_default_recipe(self):
        """Test defaults of the training objective."""
        weights = LossWeights()
        assert (weights.alpha, weights.beta, weights.gamma) == (0.25, 0.5, 0.25)
        assert weights.tau == 0.95
        assert weights.lam == 0.5 and weights.mu == 0.5

    @pytest.mark.parametrize("tau", [0.0, 1.0, 1.5, -0.1])
    def test_tau_open_interval(self, tau):
        """Test tau must lie strictly inside (0, 1)."""
        with pytest.raises(PydanticValidationError):
            LossWeights(tau=tau)

    def test_negative_weight_rejected(self):
        """Test weights are non-negative."""
        with pytest.raises(PydanticValidationError):
            LossWeights(gamma=-0.1)


class TestLossReport:
    """Tests for LossReport."""

    def test_non_finite_rejected(self):
        """Test a report never carries NaN or infinity."""
        with pytest.raises(PydanticValidationError, match="finite"):
            LossReport(loss_total=float("nan"))

    def test_field_names_are_fixed(self):
        """Test the serialized field set."""
        assert list(LossReport().model_dump()) == [
            "step",
            "epoch",
            "loss_label",
            "loss_ce",
            "loss_dice",
            "loss_unlabel",
            "loss_pal_visual",
            "loss_pal_text",
            "loss_pcl_visual",
            "loss_pcl_text",
            "loss_proto_head",
            "loss_proto",
            "loss_total",
            "retention",
            "lr",
        ]


class TestAugmentConfig:
    """Tests for AugmentConfig range validation."""

    def test_inverted_range_rejected(self):
        """Test a range whose lower bound exceeds the upper bound."""
        with pytest.raises(PydanticValidationError, match="exceeds"):
            AugmentConfig(jitter_range=(1.4, 0.6))

    def test_cutmix_area_within_unit(self):
        """Test box area fractions stay in [0, 1]."""
        with pytest.raises(PydanticValidationError):
            AugmentConfig(cutmix_area=(0.1, 1.5))


class TestRunConfig:
    """Tests for RunConfig loading, hashing and overrides."""

    def test_default_recipe(self):
        """Test defaults of the optimizer and schedule."""
        config = RunConfig()
        assert config.optimizer.lr == 0.01
        assert config.optimizer.momentum == 0.9
        assert config.optimizer.weight_decay == 1e-4
        assert config.epochs == 40
        assert config.batch_size == 1

    def test_unknown_key_is_config_error(self):
        """Test extra keys fail with ConfigError before any work starts."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"epoch": 3})

    def test_class_names_must_match_classes(self):
        """Test class names and decoder classes agree."""
        with pytest.raises(ConfigError, match="class names"):
            RunConfig.from_dict({"data": {"class_names": ["a", "b", "c"]}})

    def test_yaml_round_trip(self, tmp_path):
        """Test writing and re-reading a config preserves its hash."""
        config = RunConfig.from_dict({"seed": 3, "loss": {"tau": 0.9}})
        path = tmp_path / "run.yaml"
        config.to_yaml(path)
        assert RunConfig.from_yaml(path).config_hash() == config.config_hash()

    def test_malformed_yaml(self, tmp_path):
        """Test malformed YAML is a ConfigError."""
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigError, match="Malformed"):
            RunConfig.from_yaml(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file is a ConfigError."""
        with pytest.raises(ConfigError):
            RunConfig.from_yaml(tmp_path / "absent.yaml")

    def test_with_overrides(self):
        """Test dotted overrides replace nested values."""
        config = RunConfig().with_overrides({"loss.tau": 0.9, "model.text.coop_tokens": 3, "seed": 5})
        assert config.loss.tau == 0.9
        assert config.model.text.coop_tokens == 3
        assert config.seed == 5

    def test_unknown_override(self):
        """Test overriding an unknown key fails."""
        with pytest.raises(ConfigError, match="Unknown config key"):
            RunConfig().with_overrides({"loss.delta": 1.0})

    def test_invalid_override_value(self):
        """Test overrides are validated like file values."""
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"loss.tau": 1.5})

    def test_model_hash_ignores_training_knobs(self):
        """Test the geometry hash is stable across loss and schedule changes."""
        base = RunConfig()
        assert base.with_overrides({"loss.tau": 0.9, "epochs": 3}).model_hash() == base.model_hash()
        assert base.with_overrides({"model.proto.num_prototypes": 8}).model_hash() != base.model_hash()

    def test_schema_is_published(self):
        """Test the JSON schema names every section."""
        schema = RunConfig.model_json_schema()
        for section in ("model", "loss", "optimizer", "augment", "data"):
            assert section in schema["properties"]


class TestSyntheticSpec:
    """Tests for SyntheticSpec."""

    def test_needs_one_image_per_foreground_class(self):
        """Test there must be enough images to cover every class."""
        with pytest.raises(PydanticValidationError):
            SyntheticSpec(num_images=1, num_classes=4)


class TestSweepSpec:
    """Tests for SweepSpec."""

    def test_coop_tokens_range(self):
        """Test L values beyond six are rejected."""
        with pytest.raises(PydanticValidationError):
            SweepSpec(axis="coop_tokens", values=[1, 7])

    def test_unknown_axis(self):
        """Test only the four ablation axes are accepted."""
        with pytest.raises(PydanticValidationError):
            SweepSpec(axis="learning_rate", values=[0.1])

    def test_tau_values(self):
        """Test tau sweep values are checked."""
        spec = SweepSpec(axis="tau", values=[0.9, 0.95, 0.99])
        assert len(spec.values) == 3


class TestMetricReport:
    """Tests for MetricReport."""

    def test_table_in_percent(self):
        """Test the plain-text table prints percentages with two decimals."""
        report = MetricReport(
            miou=7 / 12,
            mdice=11 / 15,
            mcpa=5 / 6,
            per_class=[
                ClassMetrics(index=0, name="background", iou=2 / 3, dice=0.8, cpa=2 / 3),
                ClassMetrics(index=1, name="gland", iou=0.5, dice=2 / 3, cpa=1.0),
            ],
        )
        table = report.to_table()
        assert "mDICE" in table and "mIOU" in table and "mCPA" in table
        assert "73.33" in table
        assert "58.33" in table
        assert "83.33" in table


class TestSupervisionComparison:
    """Tests for SupervisionComparison."""

    def test_benefit(self):
        """Test the mean difference of the two arms."""
        result = SupervisionComparison(seeds=[0, 1], semi_mdice=[0.8, 0.9], label_only_mdice=[0.7, 0.8])
        assert result.benefit == pytest.approx(0.1)
