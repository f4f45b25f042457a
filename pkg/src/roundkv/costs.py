"""Simulated latency model for the per-turn attention pipeline.

Each layer's forward is decomposed into four steps: calc_qkv_and_rope,
update_cache, attn_forward, attn_output.  Costs are synthetic (simulated
microseconds) and only meaningful relative to each other: MAC counts at a
fixed rate, transfer bytes at a fixed PCIe-like rate, plus a fixed
overhead per step call.  The pipeline records shape observations
(``TurnShape``); ``simulate_costs`` prices them.

Compute curves and the transfer/selection overlay are kept separate:
identical attention work prices to identical compute curves regardless of
offload traffic, while the exported total curve shows the one-time spike
at the watershed layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STEP_NAMES = ("calc_qkv_and_rope", "update_cache", "attn_forward", "attn_output")
PHASES = ("append", "decode")

KIB = 1024.0


@dataclass(frozen=True)
class CostModel:
    h2d_us_per_kib: float = 0.05
    d2h_us_per_kib: float = 0.05
    ns_per_kmac: float = 1.0  # 1 simulated ns per 1024 multiply-accumulates
    step_overhead_us: float = 1.0  # fixed cost per step call

    def __post_init__(self):
        for name in ("h2d_us_per_kib", "d2h_us_per_kib", "ns_per_kmac", "step_overhead_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def compute_us(self, macs: float) -> float:
        return (macs / 1024.0) * self.ns_per_kmac * 1e-3

    def h2d_us(self, nbytes: float) -> float:
        return (nbytes / KIB) * self.h2d_us_per_kib

    def d2h_us(self, nbytes: float) -> float:
        return (nbytes / KIB) * self.d2h_us_per_kib


@dataclass
class TurnShape:
    """Shape observations for one turn, enough to price it.

    ``attended_*[l]`` is the summed visible-key count over all query rows
    processed at layer l in that phase; ``calls_*`` counts step
    invocations per layer (1 for append, one per decode step for decode).
    """

    num_layers: int
    d_model: int
    append_rows: int
    decode_steps: int
    attended_append: np.ndarray  # (L,) float
    attended_decode: np.ndarray  # (L,) float
    selection_layer: int | None = None  # layer carrying selection + upper fetch
    selection_macs: float = 0.0
    upper_h2d_bytes: float = 0.0
    lower_h2d_bytes: float = 0.0
    writeback_bytes: float = 0.0
    hist_tokens_attended: int = 0  # sum over layers of visible history tokens
    kept_rounds: int = 0


@dataclass
class CostCurves:
    """Per-layer simulated times, (phase, step) -> length-L array."""

    compute: dict[tuple[str, str], np.ndarray]
    overlay: dict[tuple[str, str], np.ndarray]  # transfer + selection spikes
    writeback_us: float

    def curve(self, phase: str, step: str) -> np.ndarray:
        return self.compute[(phase, step)] + self.overlay[(phase, step)]

    @property
    def compute_total_us(self) -> float:
        return float(sum(arr.sum() for arr in self.compute.values()))

    @property
    def overlay_total_us(self) -> float:
        return float(sum(arr.sum() for arr in self.overlay.values()))

    @property
    def total_us(self) -> float:
        return self.compute_total_us + self.overlay_total_us + self.writeback_us

    def rows(self) -> list[dict]:
        out = []
        for phase in PHASES:
            for step in STEP_NAMES:
                curve = self.curve(phase, step)
                for layer, cost in enumerate(curve):
                    out.append(
                        {"layer": layer, "step": step, "phase": phase,
                         "cost_us": float(cost)}
                    )
        return out


def simulate_costs(shape: TurnShape, model: CostModel) -> CostCurves:
    """Price a turn's shape observations into per-layer step curves.

    MAC counts: qkv projections 3*rows*d^2, attention 2*attended*d,
    output projection rows*d^2.  update_cache carries the fixed call cost
    plus, at the selection layer in the append phase, the one-time
    selection compute and batched upper-tier fetch (the watershed spike).
    Lower-tier fetch traffic lands on layer 0's append update_cache.
    """
    num_layers, d = shape.num_layers, shape.d_model
    compute = {(p, s): np.zeros(num_layers) for p in PHASES for s in STEP_NAMES}
    overlay = {(p, s): np.zeros(num_layers) for p in PHASES for s in STEP_NAMES}

    for phase, rows, attended, calls in (
        ("append", shape.append_rows, shape.attended_append, 1),
        ("decode", shape.decode_steps, shape.attended_decode, shape.decode_steps),
    ):
        if rows == 0:
            continue
        per_call = calls * model.step_overhead_us
        for l in range(num_layers):
            compute[(phase, "calc_qkv_and_rope")][l] = (
                per_call + model.compute_us(3.0 * rows * d * d)
            )
            compute[(phase, "update_cache")][l] = per_call
            compute[(phase, "attn_forward")][l] = (
                per_call + model.compute_us(2.0 * attended[l] * d)
            )
            compute[(phase, "attn_output")][l] = (
                per_call + model.compute_us(1.0 * rows * d * d)
            )

    if shape.lower_h2d_bytes:
        overlay[("append", "update_cache")][0] += model.h2d_us(shape.lower_h2d_bytes)
    if shape.selection_layer is not None:
        spike = model.compute_us(shape.selection_macs) + model.h2d_us(shape.upper_h2d_bytes)
        overlay[("append", "update_cache")][shape.selection_layer] += spike

    return CostCurves(
        compute=compute,
        overlay=overlay,
        writeback_us=model.d2h_us(shape.writeback_bytes),
    )
