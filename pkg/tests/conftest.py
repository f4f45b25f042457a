"""Shared fixtures and independent oracles.

``naive_attention`` is a deliberately slow pure-Python reference (explicit
loops, no caching, no vectorization) kept independent of both kernel
backends.  The synthetic-trace builder manufactures attention matrices
with prescribed per-round distributions so watershed detection has a
known ground truth.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from roundkv.conversation import AttentionTrace, Round


def naive_attention(q, k, v, num_heads, q_pos=None, k_pos=None, allowed=None):
    """Reference multi-head causal attention with explicit loops.

    q: (n, d_model); k, v: (s, d_model).  Returns (out (n, d_model),
    scores (n, s)) where scores are head-summed and row-renormalized.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, d_model = q.shape
    s = k.shape[0]
    d_k = d_model // num_heads
    if q_pos is None:
        q_pos = list(range(s - n, s))
    if k_pos is None:
        k_pos = list(range(s))
    out = np.zeros((n, d_model))
    scores = np.zeros((n, s))
    for i in range(n):
        for h in range(num_heads):
            logits = {}
            for j in range(s):
                if k_pos[j] > q_pos[i]:
                    continue
                if allowed is not None and not allowed[j]:
                    continue
                dot = 0.0
                for d in range(d_k):
                    dot += q[i, h * d_k + d] * k[j, h * d_k + d]
                logits[j] = dot / math.sqrt(d_k)
            m = max(logits.values())
            weights = {j: math.exp(val - m) for j, val in logits.items()}
            z = sum(weights.values())
            for j, w in weights.items():
                p = w / z
                scores[i, j] += p
                for d in range(d_k):
                    out[i, h * d_k + d] += p * v[j, h * d_k + d]
        row_total = scores[i].sum()
        if row_total > 0:
            scores[i] /= row_total
    return out, scores


def make_rounds(lengths):
    """Rounds from (q_len, a_len) pairs, tiling positions from 0."""
    rounds = []
    pos = 0
    for m, (q_len, a_len) in enumerate(lengths):
        q_span = (pos, pos + q_len)
        a_span = (pos + q_len, pos + q_len + a_len)
        rounds.append(Round(m, q_span, a_span))
        pos = a_span[1]
    return rounds


def synthetic_trace(num_layers, stable_from, *, num_prior=4, q_len=2, a_len=2,
                    seed=0, answer_matches_question=True, self_mass=0.2):
    """Trace whose per-layer round distributions are random below
    ``stable_from`` and identical from it onward.

    The analysis round is the last one; its question rows spread
    (1 - self_mass) over prior rounds per the layer's target distribution,
    uniformly within each round's columns.
    """
    rng = np.random.default_rng(seed)
    rounds = make_rounds([(q_len, a_len)] * (num_prior + 1))
    current = rounds[-1]
    seq_len = current.end

    targets = []
    stable = rng.dirichlet(np.ones(num_prior))
    for l in range(num_layers):
        targets.append(rng.dirichlet(np.ones(num_prior)) if l < stable_from else stable)

    matrices = np.zeros((num_layers, seq_len, seq_len), dtype=np.float64)
    for l in range(num_layers):
        mat = matrices[l]
        for i in range(seq_len):
            if i < current.start:
                mat[i, : i + 1] = 1.0 / (i + 1)
                continue
            # current-round rows: self_mass on the current prefix,
            # the rest on prior rounds per the layer target
            span = current.q_span if i < current.q_span[1] else current.a_span
            target = targets[l]
            if not answer_matches_question and span == current.a_span:
                target = targets[l][::-1]
            prefix = i - current.start + 1
            mat[i, current.start : i + 1] = self_mass / prefix
            for m in range(num_prior):
                prior = rounds[m]
                width = prior.end - prior.start
                mat[i, prior.start : prior.end] = (1.0 - self_mass) * target[m] / width
    return AttentionTrace(
        num_layers=num_layers,
        seq_len=seq_len,
        rounds=rounds,
        matrices=matrices.astype(np.float32),
    )


def random_share_gpt(rng, num_rounds, max_tokens=24, inflight=False):
    """ShareGPT-style message list with random printable text."""
    alphabet = "abcdefghijklmnopqrstuvwxyz QWERTY,.!?"
    def text():
        length = int(rng.integers(1, max_tokens))
        return "".join(rng.choice(list(alphabet)) for _ in range(length))

    messages = []
    for _ in range(num_rounds):
        messages.append({"from": "human", "value": text()})
        messages.append({"from": "gpt", "value": text()})
    if inflight:
        messages.append({"from": "human", "value": text()})
    return messages


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
