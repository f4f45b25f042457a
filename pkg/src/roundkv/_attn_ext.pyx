# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled multi-head causal attention kernel.

Same contract and accumulation discipline as ``_attn_np.attention_forward``
(float32 state, float64 accumulators); tight loops instead of BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp
from libc.math cimport sqrt as c_sqrt

from ._attn_np import check_attention_inputs
from .errors import InvariantError

BACKEND_NAME = "ext"


cdef Py_ssize_t _kernel(const float[:, :, ::1] q,
                        const float[:, :, ::1] k,
                        const float[:, :, ::1] v,
                        const cnp.int64_t[::1] q_pos,
                        const cnp.int64_t[::1] k_pos,
                        const unsigned char[::1] allowed,
                        float[:, ::1] out,
                        double[:, ::1] cap,
                        bint capture,
                        unsigned char[::1] vis,
                        double[::1] buf,
                        double[::1] acc):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t num_heads = q.shape[1]
    cdef Py_ssize_t d_k = q.shape[2]
    cdef Py_ssize_t s_total = k.shape[0]
    cdef double inv_scale = 1.0 / c_sqrt(<double> d_k)
    cdef Py_ssize_t i, j, h, d
    cdef int any_visible
    cdef double score, row_max, w_sum, w

    for i in range(n):
        any_visible = 0
        for j in range(s_total):
            if k_pos[j] <= q_pos[i] and allowed[j]:
                vis[j] = 1
                any_visible = 1
            else:
                vis[j] = 0
        if not any_visible:
            return i
        for h in range(num_heads):
            row_max = -1e308
            for j in range(s_total):
                if vis[j]:
                    score = 0.0
                    for d in range(d_k):
                        score += (<double> q[i, h, d]) * (<double> k[j, h, d])
                    score *= inv_scale
                    buf[j] = score
                    if score > row_max:
                        row_max = score
            w_sum = 0.0
            for j in range(s_total):
                if vis[j]:
                    w = c_exp(buf[j] - row_max)
                    buf[j] = w
                    w_sum += w
                else:
                    buf[j] = 0.0
            for d in range(d_k):
                acc[d] = 0.0
            for j in range(s_total):
                if vis[j]:
                    w = buf[j] / w_sum
                    if capture:
                        cap[i, j] += w
                    for d in range(d_k):
                        acc[d] += w * (<double> v[j, h, d])
            for d in range(d_k):
                out[i, h * d_k + d] = <float> acc[d]
    return -1


def attention_forward(q, k, v, q_pos, k_pos, allowed=None, capture=False):
    """See ``roundkv._attn_np.attention_forward``; identical contract."""
    q, k, v, q_pos, k_pos, allowed = check_attention_inputs(
        q, k, v, q_pos, k_pos, allowed
    )
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t num_heads = q.shape[1]
    cdef Py_ssize_t d_k = q.shape[2]
    cdef Py_ssize_t s_total = k.shape[0]

    out = np.zeros((n, num_heads * d_k), dtype=np.float32)
    cap = np.zeros((n, s_total), dtype=np.float64)
    if n == 0:
        return out, (cap if capture else None)

    if allowed is None:
        allowed_u8 = np.ones(s_total, dtype=np.uint8)
    else:
        allowed_u8 = allowed.view(np.uint8)

    vis = np.empty(s_total, dtype=np.uint8)
    buf = np.empty(s_total, dtype=np.float64)
    acc = np.empty(d_k, dtype=np.float64)

    bad_row = _kernel(q, k, v, q_pos, k_pos, allowed_u8, out, cap,
                      1 if capture else 0, vis, buf, acc)
    if bad_row >= 0:
        raise InvariantError(f"query row {bad_row} has no visible key")

    if capture:
        cap /= cap.sum(axis=1, keepdims=True)
        return out, cap
    return out, None
