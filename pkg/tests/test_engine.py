import numpy as np
import pytest

from roundkv.engine import Model, ModelConfig, attention_layer
from roundkv.errors import DomainError
from conftest import naive_attention


def make_model(**kwargs):
    defaults = dict(num_layers=4, num_heads=4, d_model=32, rng_seed=11)
    defaults.update(kwargs)
    return Model(ModelConfig(**defaults))


def prefill(model, tokens, start=0, **kwargs):
    cache = model.new_cache()
    positions = np.arange(start, start + len(tokens), dtype=np.int64)
    hidden, caps = model.forward_range(
        cache, 0, model.config.num_layers, tokens=tokens, positions=positions,
        **kwargs,
    )
    return cache, hidden, caps


class TestInit:
    def test_same_seed_identical_weights(self):
        a, b = make_model(), make_model()
        np.testing.assert_array_equal(a.embedding, b.embedding)
        for wa, wb in zip(a.w_q, b.w_q):
            np.testing.assert_array_equal(wa, wb)

    def test_different_seeds_differ(self):
        a, b = make_model(rng_seed=1), make_model(rng_seed=2)
        assert np.any(a.embedding != b.embedding)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(DomainError, match="divisible"):
            ModelConfig(num_layers=2, num_heads=4, d_model=6)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(DomainError, match="even"):
            ModelConfig(num_layers=2, num_heads=2, d_model=6)

    def test_nonpositive_counts_rejected(self):
        with pytest.raises(DomainError):
            ModelConfig(num_layers=0)


class TestAttentionLayer:
    def test_single_query_single_key(self, rng):
        q = rng.standard_normal((1, 8)).astype(np.float32)
        k = rng.standard_normal((1, 8)).astype(np.float32)
        v = rng.standard_normal((1, 8)).astype(np.float32)
        out, scores = attention_layer(q, k, v, num_heads=2)
        np.testing.assert_array_equal(scores, [[1.0]])

    def test_rows_sum_to_one(self, rng):
        n = 6
        q = rng.standard_normal((n, 16)).astype(np.float32)
        out, scores = attention_layer(q, q, q, num_heads=4)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-5)

    def test_matches_naive_reference(self, rng):
        x = rng.standard_normal((4, 16)).astype(np.float32)
        out, scores = attention_layer(x, x, x, num_heads=4)
        ref_out, ref_scores = naive_attention(x, x, x, 4)
        np.testing.assert_allclose(out, ref_out, atol=1e-5)
        np.testing.assert_allclose(scores, ref_scores, atol=1e-5)


class TestForwardRange:
    def test_split_equals_whole(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=12)
        cache_a, hidden_a, _ = prefill(model, tokens)

        cache_b = model.new_cache()
        pos = np.arange(12, dtype=np.int64)
        mid, _ = model.forward_range(cache_b, 0, 2, tokens=tokens, positions=pos)
        hidden_b, _ = model.forward_range(cache_b, 2, 4, hidden=mid, positions=pos)
        np.testing.assert_allclose(hidden_a, hidden_b, atol=1e-6)
        for l in range(4):
            np.testing.assert_allclose(
                cache_a.layer(l).keys, cache_b.layer(l).keys, atol=1e-6
            )

    def test_every_partition_composes(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=8)
        _, hidden_whole, _ = prefill(model, tokens)
        pos = np.arange(8, dtype=np.int64)
        for split in (1, 2, 3):
            cache = model.new_cache()
            mid, _ = model.forward_range(cache, 0, split, tokens=tokens, positions=pos)
            hidden, _ = model.forward_range(cache, split, 4, hidden=mid, positions=pos)
            np.testing.assert_allclose(hidden_whole, hidden, atol=1e-6)

    def test_empty_tokens_noop(self):
        model = make_model()
        cache = model.new_cache()
        hidden, caps = model.forward_range(
            cache, 0, 4, tokens=[], positions=[], capture_layers=[0]
        )
        assert hidden.shape == (0, 32)
        assert caps == {}
        assert cache.lengths() == [0, 0, 0, 0]

    def test_incremental_equals_batch(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=9)
        _, hidden_batch, _ = prefill(model, tokens)

        cache = model.new_cache()
        pos = np.arange(8, dtype=np.int64)
        model.forward_range(cache, 0, 4, tokens=tokens[:8], positions=pos)
        hidden_inc, _ = model.forward_range(
            cache, 0, 4, tokens=tokens[8:], positions=np.array([8])
        )
        np.testing.assert_allclose(hidden_batch[-1], hidden_inc[0], atol=1e-5)

    def test_out_of_range_rejected(self):
        model = make_model()
        with pytest.raises(DomainError, match="range"):
            model.forward_range(model.new_cache(), 0, 5, tokens=[1], positions=[0])

    def test_needs_exactly_one_input(self):
        model = make_model()
        with pytest.raises(DomainError):
            model.forward_range(model.new_cache(), 0, 4, positions=[0])

    def test_deterministic_bitwise(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=10)
        _, h1, c1 = prefill(model, tokens, capture_layers=[3])
        _, h2, c2 = prefill(model, tokens, capture_layers=[3])
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(c1[3], c2[3])

    def test_capture_causality_and_normalization(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=10)
        _, _, caps = prefill(model, tokens,
                             capture_layers=range(4))
        for l in range(4):
            scores = caps[l]
            assert np.all(np.triu(scores, k=1) == 0.0)
            np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-5)

    def test_capture_mode_pre_also_normalized(self, rng):
        model = make_model(capture_mode="pre")
        tokens = rng.integers(0, 256, size=6)
        _, _, caps = prefill(model, tokens, capture_layers=[1])
        np.testing.assert_allclose(caps[1].sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.triu(caps[1], k=1) == 0.0)


class TestEngineVsNaive:
    def test_short_sequences_match_reference(self):
        """Full multi-layer forward against a hand-rolled layer stack that
        uses the explicit-loop attention oracle (no cache, no kernel)."""
        for seed in (0, 1, 2):
            rng = np.random.default_rng(seed)
            model = make_model(rng_seed=seed, num_layers=3)
            n = int(rng.integers(2, 9))
            tokens = rng.integers(0, 256, size=n)
            pos = np.arange(n, dtype=np.int64)
            heads, d_k = model.config.num_heads, model.config.d_k

            x_ref = model.embed_tokens(tokens).astype(np.float64)
            for l in range(3):
                x32 = x_ref.astype(np.float32)
                q = model._rope((x32 @ model.w_q[l]).reshape(n, heads, d_k), pos)
                k = model._rope((x32 @ model.w_k[l]).reshape(n, heads, d_k), pos)
                v = x32 @ model.w_v[l]
                ref_out, _ = naive_attention(
                    q.reshape(n, -1), k.reshape(n, -1), v, heads
                )
                x_ref = x32 + (ref_out.astype(np.float32) @ model.w_o[l])

            _, hidden, _ = prefill(model, tokens)
            np.testing.assert_allclose(hidden, x_ref, atol=1e-5)


class TestDecode:
    def test_same_state_same_token(self, rng):
        model = make_model()
        tokens = rng.integers(0, 256, size=6)
        cache_a, _, _ = prefill(model, tokens)
        cache_b, _, _ = prefill(model, tokens)
        a, _ = model.decode_step(cache_a, 7, 6)
        b, _ = model.decode_step(cache_b, 7, 6)
        assert a == b

    def test_kv_grows_by_one_per_layer(self, rng):
        model = make_model()
        cache, _, _ = prefill(model, rng.integers(0, 256, size=5))
        before = cache.lengths()
        model.decode_step(cache, 3, 5)
        assert cache.lengths() == [n + 1 for n in before]

    def test_empty_cache_rejected(self):
        model = make_model()
        with pytest.raises(DomainError, match="non-empty"):
            model.decode_step(model.new_cache(), 3, 0)

    def test_masked_equals_truncated_cache(self, rng):
        """Decode over a visibility-masked cache == decode over the splice."""
        model = make_model()
        tokens = rng.integers(0, 256, size=12)
        full_cache, _, _ = prefill(model, tokens)
        keep_positions = [0, 1, 2, 6, 7, 10, 11]

        spliced = full_cache.spliced(keep_positions)
        masked_cache, _, _ = prefill(model, tokens)

        def allowed_fn(layer, k_pos):
            return np.isin(k_pos, keep_positions + [12])

        tok = 42
        hidden_masked, _ = model.forward_range(
            masked_cache, 0, 4, tokens=[tok], positions=[12], allowed_fn=allowed_fn
        )
        hidden_spliced, _ = model.forward_range(
            spliced, 0, 4, tokens=[tok], positions=[12]
        )
        np.testing.assert_allclose(hidden_masked, hidden_spliced, atol=1e-6)
        logits_m = model.logits(hidden_masked)[0]
        logits_s = model.logits(hidden_spliced)[0]
        assert int(np.argmax(logits_m)) == int(np.argmax(logits_s))

    def test_ties_break_to_smallest_id(self):
        model = make_model()
        row = np.zeros(model.config.vocab_size, dtype=np.float32)
        row[5] = row[9] = 1.0
        assert int(np.argmax(row)) == 5
