"""
Tests for the visual prototype bank.
"""

import math

import numpy as np
import pytest
import torch

from mpamatch.exceptions import InitializationError, ShapeError, ValidationError
from mpamatch.protovis import (
    AssignmentMap,
    PrototypeBank,
    ProtoHead,
    assign,
    binarize,
    flatten_pixels,
    fuse,
    init_prototypes,
    proto_head,
    prototype_logits,
    similarity,
    unflatten_pixels,
    update_bank,
)


def _bank(prototypes, similarity_mode="cosine", momentum=0.99) -> PrototypeBank:
    prototypes = torch.as_tensor(prototypes, dtype=torch.float32)
    counts = torch.zeros(prototypes.shape[:2], dtype=torch.int64)
    return PrototypeBank(prototypes, counts, momentum, similarity_mode)


class TestPrototypeBank:
    """Tests for PrototypeBank validation and serialization."""

    def test_flat_layout(self):
        """Test row c * K + k holds prototype k of class c."""
        bank = _bank(torch.arange(12.0).reshape(2, 3, 2))
        assert bank.flat()[4].tolist() == [8.0, 9.0]
        assert (bank.num_classes, bank.num_prototypes, bank.dim) == (2, 3, 2)

    def test_non_finite_rejected(self):
        """Test prototype vectors must be finite."""
        with pytest.raises(ValidationError):
            _bank([[[float("nan"), 0.0]]])

    def test_momentum_range(self):
        """Test momentum must lie in [0, 1)."""
        with pytest.raises(ValidationError):
            _bank([[[1.0, 0.0]]], momentum=1.0)

    def test_bad_geometry(self):
        """Test the prototype tensor must be C x K x M."""
        with pytest.raises(ShapeError):
            PrototypeBank(torch.zeros(2, 2), torch.zeros(2, dtype=torch.int64))

    def test_bytes_round_trip(self, tmp_path):
        """Test the binary blob restores every field."""
        bank = _bank(torch.randn(3, 2, 5, generator=torch.Generator().manual_seed(0)), "euclidean", 0.9)
        bank.counts[1, 0] = 7
        path = tmp_path / "bank.bin"
        bank.save(path)
        restored = PrototypeBank.load(path)
        assert torch.equal(restored.prototypes, bank.prototypes)
        assert torch.equal(restored.counts, bank.counts)
        assert restored.similarity == "euclidean"
        assert restored.momentum == pytest.approx(0.9)

    def test_truncated_blob(self):
        """Test a short blob is rejected."""
        data = _bank([[[1.0, 0.0]]]).to_bytes()
        with pytest.raises(ValidationError):
            PrototypeBank.from_bytes(data[:-3])

    def test_wrong_magic(self):
        """Test a blob with the wrong magic is rejected."""
        data = bytearray(_bank([[[1.0, 0.0]]]).to_bytes())
        data[:4] = b"XXXX"
        with pytest.raises(ValidationError, match="Not a prototype bank"):
            PrototypeBank.from_bytes(bytes(data))


class TestInitPrototypes:
    """Tests for init_prototypes."""

    def test_two_clusters(self):
        """Test two tight pairs give their midpoints."""
        points = np.array([[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 9.9]])
        bank = init_prototypes([points, points + 1.0], num_prototypes=2, similarity="euclidean")
        centers = sorted(bank.prototypes[0].tolist())
        assert centers[0] == pytest.approx([0.0, 0.05], abs=1e-5)
        assert centers[1] == pytest.approx([10.0, 9.95], abs=1e-5)

    def test_single_prototype_is_mean(self):
        """Test K=1 gives the arithmetic mean."""
        gen = torch.Generator().manual_seed(2)
        a, b = torch.randn(30, 4, generator=gen), torch.randn(20, 4, generator=gen)
        bank = init_prototypes([a, b], num_prototypes=1, similarity="dot")
        assert torch.allclose(bank.prototypes[0, 0], a.mean(0), atol=1e-5)
        assert torch.allclose(bank.prototypes[1, 0], b.mean(0), atol=1e-5)

    def test_deterministic(self):
        """Test identical inputs and seed give identical banks."""
        gen = torch.Generator().manual_seed(3)
        data = {0: torch.randn(50, 6, generator=gen), 1: torch.randn(50, 6, generator=gen)}
        first = init_prototypes(data, 4, seed=11)
        second = init_prototypes(data, 4, seed=11)
        assert torch.equal(first.prototypes, second.prototypes)

    def test_cosine_bank_unit_norm(self):
        """Test cosine banks are stored normalized."""
        gen = torch.Generator().manual_seed(4)
        bank = init_prototypes([torch.randn(40, 5, generator=gen) + 3, torch.randn(40, 5, generator=gen)], 3)
        assert torch.allclose(bank.prototypes.norm(dim=-1), torch.ones(2, 3), atol=1e-6)

    def test_padding_when_too_few_embeddings(self):
        """Test a class with fewer than K embeddings is padded with jittered copies."""
        bank = init_prototypes([np.array([[1.0, 2.0]]), np.random.default_rng(0).normal(size=(10, 2))], 3, similarity="dot")
        padded = bank.prototypes[0]
        assert torch.allclose(padded, torch.tensor([1.0, 2.0]).expand(3, 2), atol=1e-2)
        assert not torch.equal(padded[0], padded[1])

    def test_empty_class_named(self):
        """Test the error names the class without embeddings."""
        with pytest.raises(InitializationError, match="gland"):
            init_prototypes([np.ones((3, 2)), np.zeros((0, 2))], 2, class_names=["background", "gland"])


class TestSimilarity:
    """Tests for similarity."""

    def test_parallel_and_orthogonal(self):
        """Test cosine scores of parallel and orthogonal vectors."""
        bank = _bank([[[2.0, 0.0]], [[0.0, 3.0]]])
        scores = similarity(torch.tensor([[5.0, 0.0]]), bank)
        assert scores[0, 0].item() == pytest.approx(1.0)
        assert scores[0, 1].item() == pytest.approx(0.0, abs=1e-7)

    def test_zero_feature_scores_zero(self):
        """Test a zero-norm feature scores 0 against everything."""
        scores = similarity(torch.zeros(1, 2), _bank([[[1.0, 0.0]], [[0.0, 1.0]]]))
        assert torch.all(scores == 0)

    def test_random_oracle(self):
        """Test 3 pixels by 4 prototypes against a dot/norm loop."""
        gen = torch.Generator().manual_seed(5)
        feats = torch.randn(3, 6, generator=gen, dtype=torch.float64)
        protos = torch.randn(2, 2, 6, generator=gen, dtype=torch.float64)
        scores = similarity(feats, protos)
        for i in range(3):
            for j, p in enumerate(protos.reshape(4, 6)):
                x = feats[i].tolist()
                q = p.tolist()
                dot = sum(a * b for a, b in zip(x, q))
                expected = dot / (math.sqrt(sum(a * a for a in x)) * math.sqrt(sum(b * b for b in q)))
                assert scores[i, j].item() == pytest.approx(expected, abs=1e-6)

    def test_euclidean_is_negative_squared_distance(self):
        """Test euclidean mode scores."""
        scores = similarity(torch.tensor([[1.0, 1.0]]), _bank([[[1.0, 1.0]], [[4.0, 5.0]]], "euclidean"))
        assert scores.tolist() == [[0.0, -25.0]]

    def test_width_mismatch(self):
        """Test feature and prototype widths must agree."""
        with pytest.raises(ShapeError):
            similarity(torch.zeros(2, 3), _bank([[[1.0, 0.0]]]))


class TestAssign:
    """Tests for assign."""

    def test_single_prototype_per_class(self):
        """Test K=1 maps every pixel to its class index."""
        bank = _bank(torch.randn(3, 1, 4, generator=torch.Generator().manual_seed(6)))
        labels = torch.tensor([0, 2, 1, 2, 0])
        result = assign(torch.randn(5, 4), labels, bank)
        assert result.flat.tolist() == [0, 2, 1, 2, 0]

    def test_exact_match(self):
        """Test a feature equal to prototype 2 of its class picks k=2."""
        bank = _bank([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
        result = assign(torch.tensor([[0.0, 0.0, 2.0]]), torch.tensor([0]), bank)
        assert result.proto.item() == 2
        assert result.flat.item() == 2

    def test_ties_pick_lowest(self):
        """Test equal scores resolve to the lowest k."""
        bank = _bank([[[1.0, 0.0], [1.0, 0.0]]])
        assert assign(torch.tensor([[1.0, 0.0]]), torch.tensor([0]), bank).proto.item() == 0

    def test_only_own_class_considered(self):
        """Test a pixel never lands on another class's prototype."""
        bank = _bank([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, -1.0]]])
        result = assign(torch.tensor([[1.0, 0.0]]), torch.tensor([1]), bank)
        assert result.flat.item() in (2, 3)

    def test_invalid_pixels(self):
        """Test out-of-range labels and masked pixels are invalid."""
        bank = _bank(torch.randn(2, 2, 3))
        result = assign(torch.randn(4, 3), torch.tensor([0, 255, 1, 1]), bank, valid=torch.tensor([1, 1, 0, 1]))
        assert result.valid.tolist() == [True, False, False, True]

    @pytest.mark.parametrize("seed", range(10))
    def test_exhaustive_oracle(self, seed):
        """Test against brute force over every score of the pixel's class."""
        gen = torch.Generator().manual_seed(seed)
        c, k = 3, 4
        bank = _bank(torch.randn(c, k, 5, generator=gen))
        feats = torch.randn(10, 5, generator=gen)
        labels = torch.randint(0, c, (10,), generator=gen)
        result = assign(feats, labels, bank)
        scores = similarity(feats, bank)
        for i in range(10):
            cls = labels[i].item()
            candidates = [scores[i, cls * k + j].item() for j in range(k)]
            assert result.flat[i].item() == cls * k + int(np.argmax(candidates))


class TestUpdateBank:
    """Tests for update_bank."""

    def test_ema_of_constant(self):
        """Test all assigned features equal v give m * mu + (1 - m) * v."""
        bank = _bank([[[1.0, 0.0]], [[0.0, 1.0]]], "dot", momentum=0.8)
        feats = torch.tensor([[3.0, 4.0], [3.0, 4.0]])
        updated = update_bank(bank, feats, assign(feats, torch.tensor([1, 1]), bank))
        assert updated.prototypes[1, 0].tolist() == pytest.approx([0.6, 0.8 + 0.8])
        assert updated.prototypes[0, 0].tolist() == [1.0, 0.0]
        assert updated.counts.tolist() == [[0], [2]]

    def test_zero_momentum_is_batch_mean(self):
        """Test m = 0 replaces the prototype with the batch mean."""
        bank = _bank([[[1.0, 0.0]]], "dot", momentum=0.0)
        feats = torch.tensor([[2.0, 2.0], [4.0, 0.0]])
        updated = update_bank(bank, feats, assign(feats, torch.tensor([0, 0]), bank))
        assert updated.prototypes[0, 0].tolist() == pytest.approx([3.0, 1.0])

    def test_empty_batch_noop(self):
        """Test no valid pixel leaves the bank unchanged."""
        bank = _bank(torch.randn(2, 2, 3))
        feats = torch.randn(3, 3)
        result = assign(feats, torch.tensor([0, 1, 0]), bank, valid=torch.zeros(3, dtype=torch.bool))
        updated = update_bank(bank, feats, result)
        assert torch.equal(updated.prototypes, bank.prototypes)
        assert updated is not bank

    def test_cosine_unit_norm(self):
        """Test cosine banks stay unit-norm after updates."""
        gen = torch.Generator().manual_seed(8)
        bank = init_prototypes([torch.randn(20, 4, generator=gen), torch.randn(20, 4, generator=gen)], 2)
        for _ in range(5):
            feats = 3 * torch.randn(16, 4, generator=gen)
            labels = torch.randint(0, 2, (16,), generator=gen)
            bank = update_bank(bank, feats, assign(feats, labels, bank))
            assert torch.allclose(bank.prototypes.norm(dim=-1), torch.ones(2, 2), atol=1e-6)

    def test_permutation_invariant(self):
        """Test pixel order within a batch does not matter."""
        gen = torch.Generator().manual_seed(9)
        bank = _bank(torch.randn(2, 2, 3, generator=gen), "dot", 0.5)
        feats = torch.randn(12, 3, generator=gen)
        labels = torch.randint(0, 2, (12,), generator=gen)
        perm = torch.randperm(12, generator=gen)
        a = update_bank(bank, feats, assign(feats, labels, bank))
        b = update_bank(bank, feats[perm], assign(feats[perm], labels[perm], bank))
        assert torch.allclose(a.prototypes, b.prototypes, atol=1e-6)
        assert torch.equal(a.counts, b.counts)

    def test_recovers_gaussian_means(self):
        """Test repeated assign and update cycles converge on well-separated clusters."""
        gen = torch.Generator().manual_seed(10)
        means = torch.tensor([[[0.0, 0.0], [10.0, 0.0]], [[0.0, 10.0], [10.0, 10.0]]])
        bank = _bank(means + 0.8, "euclidean", momentum=0.8)
        for _ in range(50):
            feats = (means.reshape(4, 1, 2) + 0.1 * torch.randn(4, 100, 2, generator=gen)).reshape(-1, 2)
            labels = torch.tensor([0, 0, 1, 1]).repeat_interleave(100)
            bank = update_bank(bank, feats, assign(feats, labels, bank))
        assert (bank.prototypes - means).norm(dim=-1).max().item() < 0.1


class TestFuse:
    """Tests for fuse."""

    def test_single_prototype(self):
        """Test one key makes every output row equal that prototype."""
        proto = torch.tensor([[[0.3, -0.7, 2.0]]])
        out = fuse(torch.randn(5, 3), proto)
        assert torch.allclose(out, proto.reshape(1, 3).expand(5, 3))

    def test_identical_prototypes(self):
        """Test equal values give that value whatever the query."""
        proto = torch.tensor([[[1.0, 2.0], [1.0, 2.0]], [[1.0, 2.0], [1.0, 2.0]]])
        out = fuse(10 * torch.randn(4, 2), proto)
        assert torch.allclose(out, torch.tensor([1.0, 2.0]).expand(4, 2), atol=1e-6)

    def test_rows_sum_to_one(self):
        """Test attention rows are non-negative and sum to 1."""
        gen = torch.Generator().manual_seed(11)
        _, weights = fuse(5 * torch.randn(7, 4, generator=gen), torch.randn(3, 2, 4, generator=gen), return_weights=True)
        assert torch.all(weights >= 0)
        assert torch.allclose(weights.sum(-1), torch.ones(7), atol=1e-5)

    def test_hand_rolled_attention(self):
        """Test 2 pixels by 3 prototypes against explicit attention."""
        gen = torch.Generator().manual_seed(12)
        q = torch.randn(2, 4, generator=gen, dtype=torch.float64)
        v = torch.randn(3, 4, generator=gen, dtype=torch.float64)
        out = fuse(q, v.reshape(3, 1, 4))
        for i in range(2):
            logits = [sum(q[i, m].item() * v[j, m].item() for m in range(4)) / 2.0 for j in range(3)]
            z = sum(math.exp(x) for x in logits)
            expected = [sum(math.exp(logits[j]) / z * v[j, m].item() for j in range(3)) for m in range(4)]
            assert out[i].tolist() == pytest.approx(expected, abs=1e-6)

    def test_gradients(self):
        """Test fused features against finite differences."""
        gen = torch.Generator().manual_seed(13)
        q = torch.randn(3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        p = torch.randn(2, 2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b: fuse(a, b), (q, p))


class TestProtoHead:
    """Tests for the prototype head."""

    def test_probabilities_and_mask(self):
        """Test probabilities sum to 1 and the mask is binary."""
        head = ProtoHead(4, 6, 2)
        gen = torch.Generator().manual_seed(14)
        pred = proto_head(torch.randn(9, 4, generator=gen), torch.randn(9, 6, generator=gen), head)
        assert pred.logits.shape == (9, 2)
        assert torch.allclose(pred.probabilities.sum(-1), torch.ones(9), atol=1e-5)
        assert set(pred.mask.unique().tolist()) <= {0, 1}

    def test_threshold_contract(self):
        """Test foreground just above and below 0.5."""
        eps = 1e-3
        probs = torch.tensor([[0.5 - eps, 0.5 + eps], [0.5 + eps, 0.5 - eps]])
        assert binarize(probs).tolist() == [1, 0]

    def test_multiclass_argmax(self):
        """Test more than two classes use argmax."""
        assert binarize(torch.tensor([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])).tolist() == [2, 0]

    def test_misaligned_inputs(self):
        """Test attended features and scores must have the same pixel count."""
        with pytest.raises(ShapeError):
            ProtoHead(4, 6, 2)(torch.zeros(3, 4), torch.zeros(2, 6))

    def test_branch_pipeline(self):
        """Test the map-level pipeline equals the flattened one."""
        gen = torch.Generator().manual_seed(15)
        head = ProtoHead(3, 4, 2)
        maps = torch.randn(2, 3, 4, 5, generator=gen)
        bank = _bank(torch.randn(2, 2, 3, generator=gen))
        out = prototype_logits(maps, bank, head)
        pixels = flatten_pixels(maps)
        expected = head(fuse(pixels, bank), similarity(pixels, bank))
        assert out.logits.shape == (2, 2, 4, 5)
        assert torch.allclose(flatten_pixels(out.logits), expected, atol=1e-6)
        assert torch.equal(unflatten_pixels(pixels, 2, 4, 5), maps)


def test_assignment_map_fields():
    """Test the assignment tuple layout."""
    assert AssignmentMap._fields == ("cls", "proto", "flat", "valid")
