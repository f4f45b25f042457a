import math

import numpy as np
import pytest

from roundkv.errors import DomainError
from roundkv.stats import (
    KLCurve,
    aggregate_round_attention,
    detect_watershed,
    kl_curve,
    kl_divergence,
    mean_curve,
    normalize,
    spearman_qa,
)
from conftest import make_rounds, synthetic_trace


def brute_force_round_mass(scores, rounds, segment, n, k):
    """Independent double loop over token pairs (the Eq-1 oracle)."""
    rnd = rounds[n]
    span = rnd.q_span if segment == "question" else rnd.a_span
    prior = rounds[k]
    total = 0.0
    for i in range(span[0], span[1]):
        for j in list(range(*prior.q_span)) + list(range(*prior.a_span)):
            total += float(scores[i][j])
    return total


def random_causal_matrix(rng, seq_len):
    mat = np.zeros((seq_len, seq_len))
    for i in range(seq_len):
        row = rng.random(i + 1)
        mat[i, : i + 1] = row / row.sum()
    return mat


class TestAggregate:
    def test_single_prior_round_equals_brute_force(self, rng):
        rounds = make_rounds([(2, 3), (2, 2)])
        mat = random_causal_matrix(rng, rounds[-1].end)
        raw = aggregate_round_attention(mat, rounds, "question", 1)
        expected = brute_force_round_mass(mat, rounds, "question", 1, 0)
        assert raw.shape == (1,)
        assert abs(raw[0] - expected) <= 1e-9

    def test_hand_built_uniform_row(self):
        # one-token segment, uniform over 4 visible prior tokens split 3/1
        rounds = make_rounds([(2, 1), (1, 0)])  # round 0 has 3 tokens, round 1 q is token 3
        mat = np.zeros((4, 4))
        mat[3, :4] = 0.25
        mat[:3, :3] = np.tril(np.ones((3, 3)))
        for i in range(3):
            mat[i, : i + 1] /= i + 1
        raw = aggregate_round_attention(mat, rounds, "question", 1)
        np.testing.assert_allclose(raw, [0.75])

    def test_split_across_two_rounds(self):
        rounds = make_rounds([(2, 1), (1, 0), (1, 0)])
        # rounds: r0 = tokens 0..2, r1 = token 3, current r2 = token 4
        mat = np.zeros((5, 5))
        mat[4, :4] = 0.25  # uniform over 4 prior tokens, 3 in r0 and 1 in r1
        for i in range(4):
            mat[i, : i + 1] = 1.0 / (i + 1)
        raw = aggregate_round_attention(mat, rounds, "question", 2)
        np.testing.assert_allclose(raw, [0.75, 0.25])

    def test_zero_block_gives_zero_vector(self):
        rounds = make_rounds([(1, 1), (1, 1)])
        mat = np.zeros((4, 4))
        mat[2, 2] = 1.0  # q of round 1 attends only itself
        mat[3, 3] = 1.0
        raw = aggregate_round_attention(mat, rounds, "question", 1)
        np.testing.assert_array_equal(raw, [0.0])

    def test_conservation_against_brute_force(self, rng):
        """Vectorized aggregation equals the double loop, 50 random matrices."""
        for _ in range(50):
            layout = [(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
                      for _ in range(int(rng.integers(2, 5)))]
            rounds = make_rounds(layout)
            n = len(rounds) - 1
            mat = random_causal_matrix(rng, rounds[-1].end)
            for segment in ("question", "answer"):
                raw = aggregate_round_attention(mat, rounds, segment, n)
                for k in range(n):
                    expected = brute_force_round_mass(mat, rounds, segment, n, k)
                    assert abs(raw[k] - expected) <= 1e-9

    def test_row_offset_maps_capture_rows(self, rng):
        rounds = make_rounds([(2, 2), (3, 0)])
        full = random_causal_matrix(rng, 7)
        capture_rows = full[4:7]  # only the current round's rows
        raw_full = aggregate_round_attention(full, rounds, "question", 1)
        raw_rows = aggregate_round_attention(
            capture_rows, rounds, "question", 1, row_offset=4
        )
        np.testing.assert_allclose(raw_full, raw_rows, atol=1e-12)

    def test_missing_segment_rows_rejected(self, rng):
        rounds = make_rounds([(2, 2), (3, 0)])
        rows = random_causal_matrix(rng, 7)[5:]
        with pytest.raises(DomainError, match="absent"):
            aggregate_round_attention(rows, rounds, "question", 1, row_offset=5)

    def test_empty_answer_span_rejected(self):
        rounds = make_rounds([(2, 2), (3, 0)])
        with pytest.raises(DomainError, match="empty"):
            aggregate_round_attention(np.zeros((7, 7)), rounds, "answer", 1)


class TestNormalize:
    def test_symmetric(self):
        dist = normalize(np.array([2.0, 2.0]))
        np.testing.assert_allclose(dist.masses, [0.5, 0.5])
        assert not dist.degenerate

    def test_all_zero_goes_uniform_with_flag(self):
        dist = normalize(np.zeros(3))
        np.testing.assert_allclose(dist.masses, [1 / 3] * 3)
        assert dist.degenerate

    def test_already_normalized_unchanged(self):
        dist = normalize(np.array([0.75, 0.25]))
        np.testing.assert_allclose(dist.masses, [0.75, 0.25])

    def test_negative_rejected(self):
        with pytest.raises(DomainError, match="non-negative"):
            normalize(np.array([0.5, -0.1]))

    def test_masses_sum_to_one(self, rng):
        for _ in range(200):
            raw = rng.random(int(rng.integers(1, 30))) * rng.integers(1, 100)
            dist = normalize(raw)
            assert abs(dist.masses.sum() - 1.0) <= 1e-6


class TestKL:
    def test_identity_is_exactly_zero(self, rng):
        p = rng.dirichlet(np.ones(6))
        assert kl_divergence(p, p.copy()) == 0.0

    def test_ln2_hand_case(self):
        value = kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert abs(value - math.log(2)) <= 1e-6

    def test_nonnegative_on_random_pairs(self, rng):
        for _ in range(1000):
            size = int(rng.integers(2, 12))
            p, q = rng.dirichlet(np.ones(size)), rng.dirichlet(np.ones(size))
            assert kl_divergence(p, q) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            kl_divergence(np.ones(2) / 2, np.ones(3) / 3)

    def test_positive_for_distinct(self, rng):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        if not np.array_equal(p, q):
            assert kl_divergence(p, q) > 0.0


class TestKLCurve:
    def test_identical_layers_give_zero(self):
        d = np.array([0.25, 0.25, 0.5])
        curve = kl_curve([d, d.copy(), d.copy(), d.copy()])
        np.testing.assert_array_equal(curve.values, np.zeros(3))

    def test_three_layer_composition(self, rng):
        p0, p1, p2 = (rng.dirichlet(np.ones(5)) for _ in range(3))
        a, b, c = kl_divergence(p0, p1), kl_divergence(p0, p2), kl_divergence(p1, p2)
        curve = kl_curve([p0, p1, p2])
        np.testing.assert_allclose(curve.values, [(a + b) / 2, c])

    def test_values_nonnegative(self, rng):
        dists = [rng.dirichlet(np.ones(8)) for _ in range(6)]
        assert np.all(kl_curve(dists).values >= 0.0)

    def test_needs_two_layers(self):
        with pytest.raises(DomainError):
            kl_curve([np.ones(3) / 3])

    def test_lengths_must_agree(self):
        with pytest.raises(DomainError):
            kl_curve([np.ones(3) / 3, np.ones(4) / 4])


def curves_for_fixture(num_layers, stable_from, seeds):
    """Per-conversation curves from synthetic distribution corpora."""
    curves = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        stable = rng.dirichlet(np.ones(40))
        dists = [
            rng.dirichlet(np.ones(40)) if l < stable_from else stable
            for l in range(num_layers)
        ]
        curves.append(kl_curve(dists))
    return curves


class TestWatershed:
    def test_forced_drop_detected(self):
        curves = curves_for_fixture(12, 5, seeds=range(8))
        result = detect_watershed(curves)
        assert result.layer == 5
        assert result.corpus_size == 8

    def test_flat_curve_ties_to_one(self):
        flat = KLCurve(values=np.full(7, 0.3), num_layers=8)
        assert detect_watershed([flat]).layer == 1

    def test_empty_corpus_rejected(self):
        with pytest.raises(DomainError):
            detect_watershed([])

    def test_corpus_order_irrelevant(self):
        curves = curves_for_fixture(16, 7, seeds=range(6))
        a = detect_watershed(curves).layer
        b = detect_watershed(list(reversed(curves))).layer
        assert a == b == 7

    def test_threshold_criterion(self):
        values = np.array([2.0, 1.5, 0.04, 0.03, 0.02])
        curve = KLCurve(values=values, num_layers=6)
        assert detect_watershed([curve], criterion="threshold", tau=0.1).layer == 2

    def test_threshold_fallback_to_argmin(self):
        values = np.array([2.0, 1.5, 0.8, 0.5, 0.9])
        curve = KLCurve(values=values, num_layers=6)
        assert detect_watershed([curve], criterion="threshold", tau=0.1).layer == 3

    def test_result_bounds(self):
        curves = curves_for_fixture(24, 9, seeds=range(4))
        layer = detect_watershed(curves).layer
        assert 0 < layer < 24

    def test_unknown_criterion(self):
        with pytest.raises(DomainError):
            detect_watershed(curves_for_fixture(8, 3, [0]), criterion="magic")

    def test_mean_curve_averages(self):
        c1 = KLCurve(values=np.array([1.0, 0.0]), num_layers=3)
        c2 = KLCurve(values=np.array([3.0, 2.0]), num_layers=3)
        np.testing.assert_array_equal(mean_curve([c1, c2]).values, [2.0, 1.0])


class TestSpearman:
    def test_identical_profiles_give_one(self):
        trace = synthetic_trace(6, 3, answer_matches_question=True, seed=5)
        from roundkv.pipeline import layer_distributions

        n = len(trace.rounds) - 1
        pq = layer_distributions(trace.matrices, trace.rounds, n, "question")
        pa = layer_distributions(trace.matrices, trace.rounds, n, "answer")
        for q, a in zip(pq, pa):
            assert spearman_qa(q.masses, a.masses) == 1.0

    def test_range(self, rng):
        for _ in range(100):
            rho = spearman_qa(rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6)))
            assert -1.0 <= rho <= 1.0

    def test_reversed_ranks(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        assert spearman_qa(p, p[::-1]) == -1.0

    def test_constant_input_defined(self):
        assert spearman_qa(np.full(4, 0.25), np.array([0.4, 0.3, 0.2, 0.1])) == 0.0
