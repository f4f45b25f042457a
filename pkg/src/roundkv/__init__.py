"""Round-granularity KV cache management toolkit.

Core pieces: a byte-level conversation parser and attention-trace format,
a deterministic toy attention engine with a compiled kernel, round-level
attention statistics with watershed-layer detection, round-selection
strategies, a two-tier KV block store with a transfer ledger, a per-turn
serving pipeline with a simulated cost model, and a CLI tying it together.
"""

from .backend import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "__version__"]
