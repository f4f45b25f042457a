"""Round-level attention statistics.

Aggregates head-reduced attention scores into per-round masses for the
current question (or answer) segment, normalizes them into distributions
over prior rounds, compares distributions across layers with smoothed KL
divergence, and locates the watershed layer where the cross-layer
divergence collapses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.stats

from .conversation import Round
from .errors import DomainError

KL_EPSILON = 1e-10

SEGMENT_QUESTION = "question"
SEGMENT_ANSWER = "answer"


@dataclass
class RoundDistribution:
    """Normalized attention mass over prior rounds at one layer."""

    layer: int
    segment: str
    round_indices: list[int]  # prior rounds carrying mass, ascending
    raw: np.ndarray  # un-normalized per-round sums
    masses: np.ndarray  # normalized; uniform + degenerate flag if raw sums to 0
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.round_indices)


@dataclass
class KLCurve:
    """Mean KL from each layer's distribution to all later layers'."""

    values: np.ndarray  # length num_layers - 1
    num_layers: int


@dataclass
class WatershedResult:
    layer: int
    curve: KLCurve  # corpus-averaged
    criterion: str
    corpus_size: int


def aggregate_round_attention(scores: np.ndarray, rounds: list[Round], segment: str,
                              current_round: int, *, active_rounds=None,
                              row_offset: int = 0) -> np.ndarray:
    """Sum score mass from the current round's segment rows onto each prior round.

    ``scores`` columns index the full token sequence; rows index tokens
    starting at absolute position ``row_offset`` (0 for full square
    matrices; the first new-token position for prefill captures).
    ``active_rounds`` restricts which prior rounds receive entries
    (default: all of 0..current_round-1).
    """
    if segment not in (SEGMENT_QUESTION, SEGMENT_ANSWER):
        raise DomainError(f"unknown segment {segment!r}")
    if not 0 <= current_round < len(rounds):
        raise DomainError(f"current_round {current_round} out of range")
    rnd = rounds[current_round]
    span = rnd.q_span if segment == SEGMENT_QUESTION else rnd.a_span
    if span[1] <= span[0]:
        raise DomainError(f"round {current_round} has an empty {segment} span")
    row_lo, row_hi = span[0] - row_offset, span[1] - row_offset
    if row_lo < 0 or row_hi > scores.shape[0]:
        raise DomainError(
            f"{segment} rows [{span[0]}, {span[1]}) absent from scores"
        )
    seg_rows = np.asarray(scores, dtype=np.float64)[row_lo:row_hi]

    active = list(active_rounds) if active_rounds is not None else list(range(current_round))
    raw = np.empty(len(active), dtype=np.float64)
    for i, k in enumerate(active):
        prior = rounds[k]
        if not 0 <= k < current_round:
            raise DomainError(f"round {k} is not prior to round {current_round}")
        total = seg_rows[:, prior.q_span[0]:prior.q_span[1]].sum()
        total += seg_rows[:, prior.a_span[0]:prior.a_span[1]].sum()
        raw[i] = total
    return raw


def normalize(raw: np.ndarray, *, layer: int = 0, segment: str = SEGMENT_QUESTION,
              round_indices=None) -> RoundDistribution:
    """Normalize raw per-round masses into a distribution (uniform if all zero)."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise DomainError("raw attention masses must be non-negative")
    if round_indices is None:
        round_indices = list(range(len(raw)))
    total = raw.sum()
    if total > 0:
        masses = raw / total
        degenerate = False
    else:
        masses = np.full(len(raw), 1.0 / len(raw)) if len(raw) else raw.copy()
        degenerate = True
    return RoundDistribution(
        layer=layer, segment=segment, round_indices=list(round_indices),
        raw=raw, masses=masses, degenerate=degenerate,
    )


def kl_divergence(p, q, epsilon: float = KL_EPSILON) -> float:
    """Smoothed forward KL in nats; exactly 0 for identical inputs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"length mismatch: {p.shape} vs {q.shape}")
    if np.array_equal(p, q):
        return 0.0
    ps = (p + epsilon) / (p + epsilon).sum()
    qs = (q + epsilon) / (q + epsilon).sum()
    return float(np.sum(ps * np.log(ps / qs)))


def kl_curve(per_layer_masses) -> KLCurve:
    """D(l) = mean KL from layer l's distribution to every later layer's."""
    dists = [np.asarray(d, dtype=np.float64) for d in per_layer_masses]
    num_layers = len(dists)
    if num_layers < 2:
        raise DomainError("cross-layer curve needs at least 2 layers")
    lengths = {d.shape for d in dists}
    if len(lengths) != 1:
        raise DomainError("per-layer distributions must share one length")
    values = np.empty(num_layers - 1, dtype=np.float64)
    for l in range(num_layers - 1):
        later = [kl_divergence(dists[l], dists[lp]) for lp in range(l + 1, num_layers)]
        values[l] = float(np.mean(later))
    return KLCurve(values=values, num_layers=num_layers)


def mean_curve(curves: list[KLCurve]) -> KLCurve:
    if not curves:
        raise DomainError("empty calibration corpus")
    layer_counts = {c.num_layers for c in curves}
    if len(layer_counts) != 1:
        raise DomainError("curves disagree on layer count")
    stacked = np.stack([c.values for c in curves])
    return KLCurve(values=stacked.mean(axis=0), num_layers=curves[0].num_layers)


def detect_watershed(curves: list[KLCurve], criterion: str = "max_drop",
                     tau: float = 0.1) -> WatershedResult:
    """Find the layer where cross-layer divergence collapses.

    ``max_drop`` (default): the l in [1, L-1) maximizing D(l-1) - D(l),
    smallest on ties.  ``threshold``: the smallest l in [1, L-1) with
    D(l) <= tau, falling back to the argmin layer if none qualifies.
    """
    avg = mean_curve(curves)
    d = avg.values
    num_layers = avg.num_layers
    if num_layers < 3:
        raise DomainError("watershed detection needs at least 3 layers")
    candidates = np.arange(1, num_layers - 1)
    if criterion == "max_drop":
        drops = d[candidates - 1] - d[candidates]
        layer = int(candidates[np.argmax(drops)])
    elif criterion == "threshold":
        below = candidates[d[candidates] <= tau]
        layer = int(below[0]) if below.size else int(candidates[np.argmin(d[candidates])])
    else:
        raise DomainError(f"unknown watershed criterion {criterion!r}")
    return WatershedResult(
        layer=layer, curve=avg, criterion=criterion, corpus_size=len(curves)
    )


def spearman_qa(p_q, p_a) -> float:
    """Rank correlation between question- and answer-side distributions.

    Identical inputs give exactly 1.0; zero-variance inputs (no ranking
    defined) give 0.0.
    """
    p_q = np.asarray(p_q, dtype=np.float64)
    p_a = np.asarray(p_a, dtype=np.float64)
    if p_q.shape != p_a.shape:
        raise DomainError("distributions must have equal length")
    if np.array_equal(p_q, p_a):
        return 1.0
    rho = scipy.stats.spearmanr(p_q, p_a).statistic
    if np.isnan(rho):
        return 0.0
    return float(rho)


def write_curve_csv(path: Path, curve: KLCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "value"])
        for l, value in enumerate(curve.values):
            writer.writerow([l, repr(float(value))])


def write_distribution_csv(path: Path, dists: list[RoundDistribution]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "segment", "round", "mass"])
        for dist in dists:
            for k, mass in zip(dist.round_indices, dist.masses):
                writer.writerow([dist.layer, dist.segment, k, repr(float(mass))])
