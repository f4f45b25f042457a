"""Deterministic miniature multi-layer attention model.

Architecture is attention + residual only (no MLP), with rotary position
encoding applied to queries and keys by absolute position and a tied
output projection.  Every weight comes from one seeded PRNG, so a config
seed fully determines the model.  Keys are cached post-rotation: a cache
row carries its absolute position, which is what makes physically spliced
caches equivalent to visibility-masked attention.

Hidden state and weights are float32; the kernel accumulates in float64
(see ``roundkv.backend``).  Captured score matrices are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import attention_forward
from .conversation import VOCAB_SIZE
from .errors import DomainError

CAPTURE_MODES = ("post", "pre")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 32
    vocab_size: int = VOCAB_SIZE
    rng_seed: int = 42
    rope_theta: float = 10000.0
    # "post": average per-head probability rows (default); "pre": softmax of
    # the head-averaged logits.  Affects captured scores only, never outputs.
    capture_mode: str = "post"

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.d_model < 1:
            raise DomainError("layer, head, and model-dimension counts must be >= 1")
        if self.vocab_size < 1:
            raise DomainError("vocab_size must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise DomainError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if (self.d_model // self.num_heads) % 2 != 0:
            raise DomainError("head dimension must be even for rotary encoding")
        if self.capture_mode not in CAPTURE_MODES:
            raise DomainError(f"capture_mode must be one of {CAPTURE_MODES}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


class LayerKV:
    """Append-only keys/values for one layer, with absolute positions."""

    __slots__ = ("keys", "values", "positions")

    def __init__(self, d_model: int):
        self.keys = np.zeros((0, d_model), dtype=np.float32)
        self.values = np.zeros((0, d_model), dtype=np.float32)
        self.positions = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, keys: np.ndarray, values: np.ndarray, positions: np.ndarray):
        if keys.shape != values.shape or keys.shape[0] != positions.shape[0]:
            raise DomainError("key/value/position row counts must agree")
        self.keys = np.concatenate([self.keys, keys])
        self.values = np.concatenate([self.values, values])
        self.positions = np.concatenate([self.positions, positions])


class KVCache:
    """One LayerKV per model layer, owned by a single conversation."""

    def __init__(self, num_layers: int, d_model: int):
        self.layers = [LayerKV(d_model) for _ in range(num_layers)]

    def __len__(self) -> int:
        return len(self.layers)

    def lengths(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    def layer(self, l: int) -> LayerKV:
        return self.layers[l]

    def spliced(self, keep_positions, layer_indices=None) -> "KVCache":
        """New cache holding only rows whose absolute position is kept.

        Rows keep their original positions, so attention over the splice
        equals masked attention over the full cache.
        """
        keep = np.asarray(sorted(keep_positions), dtype=np.int64)
        out = KVCache.__new__(KVCache)
        out.layers = []
        layer_indices = range(len(self.layers)) if layer_indices is None else layer_indices
        for l in layer_indices:
            src = self.layers[l]
            idx = np.isin(src.positions, keep)
            dst = LayerKV(src.keys.shape[1])
            dst.keys = src.keys[idx].copy()
            dst.values = src.values[idx].copy()
            dst.positions = src.positions[idx].copy()
            out.layers.append(dst)
        return out


def _heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d_model = x.shape
    return np.ascontiguousarray(x.reshape(n, num_heads, d_model // num_heads))


def attention_layer(queries, keys, values, *, num_heads, q_pos=None, k_pos=None,
                    allowed=None, capture=True):
    """One attention layer over flat (rows, d_model) arrays.

    Causal masking uses absolute positions; by default queries are the
    trailing rows of the key sequence.  Returns the concatenated per-head
    outputs (rows, d_model) and the head-reduced float64 score matrix
    (each row sums to 1 over the visible prefix).
    """
    queries = np.asarray(queries, dtype=np.float32)
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise DomainError("queries, keys, values must be 2-D (rows, d_model)")
    n, s_total = queries.shape[0], keys.shape[0]
    if k_pos is None:
        k_pos = np.arange(s_total, dtype=np.int64)
    if q_pos is None:
        q_pos = np.arange(s_total - n, s_total, dtype=np.int64)
    out, scores = attention_forward(
        _heads(queries, num_heads), _heads(keys, num_heads), _heads(values, num_heads),
        q_pos, k_pos, allowed=allowed, capture=capture,
    )
    return out, scores


class Model:
    """Immutable after init; share freely across threads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.rng_seed)
        scale = c.d_model ** -0.5
        self.embedding = rng.standard_normal((c.vocab_size, c.d_model)).astype(np.float32)
        self.w_q, self.w_k, self.w_v, self.w_o = [], [], [], []
        out_scale = scale / np.sqrt(2.0 * c.num_layers)
        for _ in range(c.num_layers):
            self.w_q.append((rng.standard_normal((c.d_model, c.d_model)) * scale).astype(np.float32))
            self.w_k.append((rng.standard_normal((c.d_model, c.d_model)) * scale).astype(np.float32))
            self.w_v.append((rng.standard_normal((c.d_model, c.d_model)) * scale).astype(np.float32))
            self.w_o.append((rng.standard_normal((c.d_model, c.d_model)) * out_scale).astype(np.float32))
        # rotary frequency per head-dim pair, shared across heads
        half = c.d_k // 2
        self._rope_freq = c.rope_theta ** (-np.arange(half, dtype=np.float64) * 2.0 / c.d_k)

    def new_cache(self) -> KVCache:
        return KVCache(self.config.num_layers, self.config.d_model)

    def embed_tokens(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise DomainError("token id outside vocabulary")
        return self.embedding[ids]

    def _rope(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate (rows, heads, d_k) by absolute position; float64 trig, float32 out."""
        angles = positions[:, None].astype(np.float64) * self._rope_freq[None, :]
        cos = np.cos(angles)[:, None, :]  # (rows, 1, d_k/2)
        sin = np.sin(angles)[:, None, :]
        x64 = x.astype(np.float64)
        even, odd = x64[..., 0::2], x64[..., 1::2]
        rotated = np.empty_like(x64)
        rotated[..., 0::2] = even * cos - odd * sin
        rotated[..., 1::2] = even * sin + odd * cos
        return rotated.astype(np.float32)

    def _capture_pre(self, q_h, layer_kv, q_pos, allowed) -> np.ndarray:
        """Head-averaged-logit capture variant (config capture_mode="pre")."""
        k_h = _heads(layer_kv.keys, self.config.num_heads)
        logits = np.einsum(
            "nhd,shd->ns", q_h.astype(np.float64), k_h.astype(np.float64)
        ) / (self.config.num_heads * np.sqrt(self.config.d_k))
        visible = layer_kv.positions[None, :] <= q_pos[:, None]
        if allowed is not None:
            visible = visible & np.asarray(allowed, dtype=bool)[None, :]
        logits = np.where(visible, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        return weights

    def forward_range(self, cache: KVCache, layer_lo: int, layer_hi: int, *,
                      tokens=None, hidden=None, positions=None,
                      allowed_fn=None, capture_layers=None):
        """Run layers [layer_lo, layer_hi) over new rows, appending to the cache.

        Exactly one of ``tokens`` / ``hidden`` must be given (token ids to
        embed, or hidden state handed over from an earlier layer range).
        ``positions`` are the rows' absolute positions. ``allowed_fn(layer,
        key_positions)`` may return a per-key visibility mask (None = all).
        ``capture_layers`` is an iterable of layer indices whose head-reduced
        scores should be captured.

        Returns ``(hidden_out, captures)`` with captures keyed by layer.
        """
        if not (0 <= layer_lo <= layer_hi <= self.config.num_layers):
            raise DomainError(
                f"layer range [{layer_lo}, {layer_hi}) out of bounds"
            )
        if (tokens is None) == (hidden is None):
            raise DomainError("pass exactly one of tokens or hidden")
        if tokens is not None:
            tokens = np.asarray(tokens, dtype=np.int64)
            if tokens.size == 0:
                return np.zeros((0, self.config.d_model), dtype=np.float32), {}
            x = self.embed_tokens(tokens)
        else:
            x = np.asarray(hidden, dtype=np.float32)
            if x.shape[0] == 0:
                return x, {}
        if positions is None:
            raise DomainError("positions are required")
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (x.shape[0],):
            raise DomainError("positions must match row count")
        if layer_hi > len(cache.layers):
            raise DomainError(
                f"cache has {len(cache.layers)} layers, range needs {layer_hi}"
            )

        capture_set = set(capture_layers) if capture_layers is not None else set()
        num_heads = self.config.num_heads
        captures: dict[int, np.ndarray] = {}
        for l in range(layer_lo, layer_hi):
            q = self._rope(_heads(x @ self.w_q[l], num_heads), positions)
            k_new = self._rope(_heads(x @ self.w_k[l], num_heads), positions)
            v_new = _heads(x @ self.w_v[l], num_heads)
            layer_kv = cache.layer(l)
            layer_kv.append(
                k_new.reshape(x.shape[0], -1), v_new.reshape(x.shape[0], -1), positions
            )
            allowed = allowed_fn(l, layer_kv.positions) if allowed_fn is not None else None
            want_capture = l in capture_set
            out, scores = attention_forward(
                q,
                _heads(layer_kv.keys, num_heads),
                _heads(layer_kv.values, num_heads),
                positions,
                layer_kv.positions,
                allowed=allowed,
                capture=want_capture and self.config.capture_mode == "post",
            )
            if want_capture:
                if self.config.capture_mode == "pre":
                    scores = self._capture_pre(q, layer_kv, positions, allowed)
                captures[l] = scores
            x = x + out @ self.w_o[l]
        return x, captures

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return hidden @ self.embedding.T  # tied output projection

    def decode_step(self, cache: KVCache, token_id: int, position: int, *,
                    allowed_fn=None) -> tuple[int, np.ndarray]:
        """Feed one token through all layers; greedy-argmax the next id.

        Ties break toward the smallest token id.  Appends exactly one KV
        row per layer.
        """
        if any(len(cache.layer(l)) == 0 for l in range(len(cache))):
            raise DomainError("decode requires a non-empty cache for every layer")
        hidden, _ = self.forward_range(
            cache, 0, self.config.num_layers,
            tokens=[token_id], positions=[position], allowed_fn=allowed_fn,
        )
        row = self.logits(hidden)[0]
        return int(np.argmax(row)), row
