"""Pure-NumPy multi-head causal attention kernel.

Fallback for (and numerically interchangeable with) the compiled kernel in
``_attn_ext``.  State is float32; softmax and weighted sums accumulate in
float64, so the two backends agree to well under 1e-6.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, InvariantError

BACKEND_NAME = "numpy"


def check_attention_inputs(q, k, v, q_pos, k_pos, allowed):
    """Normalize dtypes/layout and validate shapes shared by both backends.

    q: (n, H, d_k) new-query heads; k, v: (S, H, d_k) cached keys/values;
    q_pos/k_pos: absolute token positions; allowed: optional (S,) bool
    visibility restriction on key rows (causality is always applied on top).
    """
    q = np.ascontiguousarray(q, dtype=np.float32)
    k = np.ascontiguousarray(k, dtype=np.float32)
    v = np.ascontiguousarray(v, dtype=np.float32)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DomainError("q, k, v must be (rows, heads, head_dim) arrays")
    if k.shape != v.shape:
        raise DomainError(f"key/value shape mismatch: {k.shape} vs {v.shape}")
    if q.shape[1:] != k.shape[1:]:
        raise DomainError(
            f"query heads {q.shape[1:]} do not match key heads {k.shape[1:]}"
        )
    if q.shape[2] == 0:
        raise DomainError("head_dim must be positive")
    q_pos = np.ascontiguousarray(q_pos, dtype=np.int64)
    k_pos = np.ascontiguousarray(k_pos, dtype=np.int64)
    if q_pos.shape != (q.shape[0],) or k_pos.shape != (k.shape[0],):
        raise DomainError("position arrays must match q/k row counts")
    if allowed is not None:
        allowed = np.ascontiguousarray(allowed, dtype=bool)
        if allowed.shape != (k.shape[0],):
            raise DomainError("allowed mask must have one entry per key row")
    return q, k, v, q_pos, k_pos, allowed


def attention_forward(q, k, v, q_pos, k_pos, allowed=None, capture=False):
    """Causal multi-head attention over cached keys/values.

    Returns ``(out, scores)`` where ``out`` is (n, H*d_k) float32 (per-head
    weighted value sums, concatenated) and ``scores`` is the head-reduced
    (n, S) float64 probability matrix (rows renormalized to sum to 1), or
    None when ``capture`` is false.
    """
    q, k, v, q_pos, k_pos, allowed = check_attention_inputs(
        q, k, v, q_pos, k_pos, allowed
    )
    n, num_heads, d_k = q.shape
    s_total = k.shape[0]
    if n == 0:
        out = np.zeros((0, num_heads * d_k), dtype=np.float32)
        return out, (np.zeros((0, s_total)) if capture else None)

    visible = k_pos[None, :] <= q_pos[:, None]
    if allowed is not None:
        visible = visible & allowed[None, :]
    rows_ok = visible.any(axis=1)
    if not rows_ok.all():
        raise InvariantError(
            f"query row {int(np.argmin(rows_ok))} has no visible key"
        )

    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    v64 = v.astype(np.float64)
    logits = np.einsum("nhd,shd->hns", q64, k64) / math.sqrt(d_k)
    logits = np.where(visible[None, :, :], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)

    out = np.einsum("hns,shd->nhd", weights, v64)
    out = out.reshape(n, num_heads * d_k).astype(np.float32)

    scores = None
    if capture:
        scores = weights.sum(axis=0)
        scores /= scores.sum(axis=1, keepdims=True)
    return out, scores
