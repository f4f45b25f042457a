"""Attention kernel backend selection.

The compiled kernel (``roundkv._attn_ext``, Cython) is preferred; the
pure-NumPy kernel is the fallback.  Selection happens once at import and
can be forced with ``ROUNDKV_BACKEND=ext|numpy|auto``.
"""

from __future__ import annotations

import os

from . import _attn_np


def _load_ext():
    from . import _attn_ext  # noqa: PLC0415 -- deferred: may not be built

    return _attn_ext


def available_backends() -> dict:
    """Name -> kernel module, for tests and benchmarks."""
    backends = {"numpy": _attn_np}
    try:
        backends["ext"] = _load_ext()
    except ImportError:
        pass
    return backends


_requested = os.environ.get("ROUNDKV_BACKEND", "auto").lower()
if _requested == "numpy":
    _impl = _attn_np
elif _requested == "ext":
    _impl = _load_ext()
elif _requested == "auto":
    try:
        _impl = _load_ext()
    except ImportError:
        _impl = _attn_np
else:
    raise ImportError(
        f"ROUNDKV_BACKEND={_requested!r} not recognized (use ext, numpy, or auto)"
    )

BACKEND_NAME: str = _impl.BACKEND_NAME
attention_forward = _impl.attention_forward
