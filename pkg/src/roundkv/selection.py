"""Round-selection strategies, the inactivity drop policy, and the
token-granularity comparison selector.

All strategies consume a normalized distribution over prior rounds and
return the kept subset.  Degenerate selections (nothing above threshold)
fall back to the single highest-mass round so the pipeline always has at
least one prior block to attend when history exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .stats import RoundDistribution

POLICY_KINDS = ("fixed", "top_percent", "adaptive", "all", "token_baseline")

# guard against binary float artifacts like 0.1 * 30 = 3.0000000000000004
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "top_percent"
    v: float = 0.1
    fraction: float = 0.10
    kappa: float = 1.0
    min_rounds: int = 1

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DomainError(f"policy kind must be one of {POLICY_KINDS}")
        if not 0.0 < self.v < 1.0:
            raise DomainError("fixed threshold v must lie in (0, 1)")
        if not 0.0 < self.fraction <= 1.0:
            raise DomainError("fraction must lie in (0, 1]")
        if self.min_rounds < 1:
            raise DomainError("min_rounds must be >= 1")


@dataclass
class SelectionResult:
    kept: tuple[int, ...]  # ascending prior-round indices
    policy: str
    masses: np.ndarray  # distribution snapshot
    round_indices: tuple[int, ...]  # candidate rounds the masses cover

    @property
    def K(self) -> int:
        return len(self.kept)


def _empty_result(policy: str) -> SelectionResult:
    return SelectionResult(
        kept=(), policy=policy, masses=np.zeros(0), round_indices=()
    )


def _result(dist: RoundDistribution, kept_positions, policy: str) -> SelectionResult:
    kept = tuple(sorted(dist.round_indices[i] for i in kept_positions))
    return SelectionResult(
        kept=kept, policy=policy, masses=dist.masses.copy(),
        round_indices=tuple(dist.round_indices),
    )


def _argmax_fallback(masses: np.ndarray) -> list[int]:
    # np.argmax returns the first maximum: smallest index wins ties
    return [int(np.argmax(masses))]


def select_fixed(dist: RoundDistribution, v: float = 0.1,
                 policy_tag: str = "fixed") -> SelectionResult:
    """Keep every round whose mass exceeds the threshold v."""
    if len(dist) == 0:
        return _empty_result(policy_tag)
    kept = [i for i, m in enumerate(dist.masses) if m > v]
    if not kept:
        kept = _argmax_fallback(dist.masses)
    return _result(dist, kept, policy_tag)


def select_top_percent(dist: RoundDistribution, fraction: float = 0.10,
                       min_rounds: int = 1) -> SelectionResult:
    """Keep the top ceil(fraction * n_prior) rounds by mass (at least min_rounds)."""
    n_prior = len(dist)
    if n_prior == 0:
        return _empty_result("top_percent")
    k = max(min_rounds, math.ceil(fraction * n_prior - _CEIL_SLACK))
    k = min(k, n_prior)
    # stable sort on negated masses: ties resolve to the smaller round index
    order = np.argsort(-dist.masses, kind="stable")
    return _result(dist, order[:k], "top_percent")


def select_adaptive(dist: RoundDistribution, kappa: float = 1.0) -> SelectionResult:
    """Keep rounds with mass above mean + kappa * std (population std)."""
    if len(dist) == 0:
        return _empty_result("adaptive")
    cut = dist.masses.mean() + kappa * dist.masses.std()
    kept = [i for i, m in enumerate(dist.masses) if m > cut]
    if not kept:
        kept = _argmax_fallback(dist.masses)
    return _result(dist, kept, "adaptive")


def select_all(dist: RoundDistribution) -> SelectionResult:
    if len(dist) == 0:
        return _empty_result("all")
    return _result(dist, range(len(dist)), "all")


def select(dist: RoundDistribution, policy: SelectionPolicy) -> SelectionResult:
    if policy.kind == "fixed":
        return select_fixed(dist, policy.v)
    if policy.kind == "top_percent":
        return select_top_percent(dist, policy.fraction, policy.min_rounds)
    if policy.kind == "adaptive":
        return select_adaptive(dist, policy.kappa)
    if policy.kind == "all":
        return select_all(dist)
    raise DomainError(f"policy {policy.kind!r} is not a round-selection strategy")


@dataclass
class TokenSelection:
    kept_tokens: tuple[int, ...]  # ascending absolute positions
    segments: int  # contiguous runs in kept_tokens
    candidate_count: int


def contiguous_segments(positions) -> int:
    positions = sorted(positions)
    if not positions:
        return 0
    return 1 + sum(
        1 for a, b in zip(positions, positions[1:]) if b != a + 1
    )


def select_token_baseline(score_rows: np.ndarray, candidate_positions) -> TokenSelection:
    """Above-mean per-token selector for the granularity comparison.

    ``score_rows`` are the current question's capture rows; candidates are
    the absolute positions of prior-round tokens.  Each candidate's score
    is its mean attention over the question rows; tokens strictly above
    the candidate mean are kept (argmax fallback when none are).
    """
    candidates = np.asarray(list(candidate_positions), dtype=np.int64)
    if candidates.size == 0:
        return TokenSelection(kept_tokens=(), segments=0, candidate_count=0)
    per_token = np.asarray(score_rows, dtype=np.float64)[:, candidates].mean(axis=0)
    kept = candidates[per_token > per_token.mean()]
    if kept.size == 0:
        kept = candidates[[int(np.argmax(per_token))]]
    kept_sorted = tuple(int(p) for p in np.sort(kept))
    return TokenSelection(
        kept_tokens=kept_sorted,
        segments=contiguous_segments(kept_sorted),
        candidate_count=int(candidates.size),
    )


@dataclass
class ActivityLedger:
    """Tracks, per round, the last turn it was created or selected."""

    window: float = 8  # turns of inactivity before dropping; inf disables
    protect_recent: int = 2  # newest rounds never dropped
    last_active: dict[int, int] = field(default_factory=dict)
    dropped: set[int] = field(default_factory=set)

    def register_round(self, round_index: int, turn: int) -> None:
        self.last_active.setdefault(round_index, turn)

    def active_rounds(self, upto: int) -> list[int]:
        return [m for m in range(upto) if m not in self.dropped]

    def update_and_drop(self, kept, current_turn: int, total_rounds: int) -> list[int]:
        """Record this turn's selection; return rounds to drop.

        A round is dropped when it was never selected within the last
        ``window`` turns, is not among the ``protect_recent`` newest
        rounds, and is not in the current kept set.
        """
        kept = set(kept)
        for m in kept:
            self.last_active[m] = current_turn
        if math.isinf(self.window):
            return []
        drops = []
        for m in range(total_rounds):
            if m in self.dropped or m in kept:
                continue
            if m >= total_rounds - self.protect_recent:
                continue
            if current_turn - self.last_active.get(m, current_turn) >= self.window:
                drops.append(m)
        self.dropped.update(drops)
        return drops
