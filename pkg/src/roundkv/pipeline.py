"""Per-turn serving pipeline over the tiered store.

One turn runs: batched lower-block fetch, lower-layer prefill of the new
question with a score capture at the last lower layer, one-time round
selection from that capture, one batched upper-block fetch for the kept
rounds, upper-layer prefill restricted to kept rounds plus the current
one, greedy decode under the same restriction, then a single batched
writeback of the touched upper blocks and the new round's upper block.

Three modes share the machinery:

* ``round``   -- the selective pipeline described above.
* ``baseline``-- full-cache attention, nothing offloaded, no selection;
                 the equivalence and cost-comparison oracle.
* ``token``   -- granularity comparator: same one-time capture, but kept
                 set chosen per token; upper layers mask to kept tokens and
                 transfers are accounted per contiguous token segment per
                 layer (round-monolithic blocks have no sub-block access,
                 so this mode bypasses the tiered store's block moves).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conversation import Conversation, EOT_TOKEN, Round, SEP_TOKEN, tokenize
from .costs import CostCurves, CostModel, TurnShape, simulate_costs
from .engine import KVCache, Model
from .errors import DomainError
from .selection import (
    ActivityLedger,
    SelectionPolicy,
    SelectionResult,
    TokenSelection,
    select,
    select_token_baseline,
)
from .stats import (
    KLCurve,
    RoundDistribution,
    SEGMENT_QUESTION,
    WatershedResult,
    aggregate_round_attention,
    detect_watershed,
    kl_curve,
    normalize,
)
from .store import MODELED_ELEM_BYTES, TieredStore

MODES = ("round", "baseline", "token")


def restricted_attention_mask(kept, rounds, current_start, key_positions,
                              upper: bool):
    """Visibility mask over key rows: full causal below the watershed,
    kept rounds plus the current round above it.  None means unrestricted.
    """
    if not upper:
        return None
    key_positions = np.asarray(key_positions, dtype=np.int64)
    allowed = key_positions >= current_start
    for m in kept:
        rnd = rounds[m]
        allowed |= (key_positions >= rnd.start) & (key_positions < rnd.end)
    return allowed


@dataclass
class TokenTransferStats:
    """Transfer accounting for the token-granularity comparator."""

    kept_tokens: int
    segments: int
    layer_touches: int  # one per upper layer: selection applied layer by layer
    h2d_events: int  # one per contiguous segment per upper layer
    h2d_bytes: int


@dataclass
class TurnMetrics:
    round_index: int
    mode: str
    policy: str
    append_rows: int
    decode_steps: int
    kept: tuple[int, ...]
    K: int
    selection_invocations: int
    upper_h2d_events: int
    upper_h2d_bytes: int
    lower_h2d_events: int
    lower_h2d_bytes: int
    d2h_events: int
    d2h_bytes: int
    device_used_peak: int
    hist_tokens: int  # active-history token count at turn start
    hist_tokens_attended: int  # sum over layers of visible history tokens
    total_cost_us: float
    curves: CostCurves
    shape: TurnShape
    distribution: RoundDistribution | None = None
    token_stats: TokenTransferStats | None = None
    dropped_rounds: tuple[int, ...] = ()


@dataclass
class TurnResult:
    answer_ids: list[int]
    metrics: TurnMetrics


class RoundPipeline:
    """Owns one conversation's serving state; strictly sequential per turn."""

    def __init__(self, model: Model, watershed: int, *,
                 policy: SelectionPolicy | None = None,
                 mode: str = "round",
                 store: TieredStore | None = None,
                 cost_model: CostModel | None = None,
                 drop_window: float = float("inf"),
                 drop_protect: int = 2,
                 conversation_id: str = "conv0"):
        if mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        num_layers = model.config.num_layers
        if not 0 < watershed < num_layers:
            raise DomainError(
                f"watershed must satisfy 0 < L_w < L, got {watershed} of {num_layers}"
            )
        if mode == "round" and policy is None:
            raise DomainError("round mode needs a selection policy")
        self.model = model
        self.watershed = watershed
        self.policy = policy
        self.mode = mode
        self.cost_model = cost_model or CostModel()
        self.store = store or TieredStore(
            num_layers, watershed, model.config.d_model,
            conversation_id=conversation_id,
        )
        self.activity = ActivityLedger(
            window=drop_window if mode == "round" else float("inf"),
            protect_recent=drop_protect,
        )
        self.rounds: list[Round] = []
        self.token_ids: list[int] = []
        # debug switch exercised by the mask/splice equivalence tests
        self.attend_mode = "splice"

    @classmethod
    def baseline(cls, model: Model, watershed: int, **kwargs) -> "RoundPipeline":
        return cls(model, watershed, mode="baseline", **kwargs)

    # -- cache assembly ------------------------------------------------------

    def _assemble(self, cache: KVCache, layer_lo: int, layer_hi: int,
                  blocks) -> int:
        """Fill working-cache layers from block payloads; returns token count."""
        total = 0
        for block in blocks:
            payload, positions = block.payload, block.positions
            for offset, l in enumerate(range(layer_lo, layer_hi)):
                cache.layer(l).append(
                    payload[offset, 0], payload[offset, 1], positions
                )
            total += block.tokens
        return total

    def _extract_new_rows(self, cache: KVCache, layer_lo: int, layer_hi: int,
                          start_len: int) -> np.ndarray:
        """Stack rows appended past start_len into (layers, 2, tokens, d)."""
        per_layer = []
        for l in range(layer_lo, layer_hi):
            layer = cache.layer(l)
            per_layer.append(
                np.stack([layer.keys[start_len:], layer.values[start_len:]])
            )
        return np.stack(per_layer)

    # -- selection ------------------------------------------------------------

    def _active_priors(self, n: int) -> list[int]:
        return self.activity.active_rounds(n)

    def _round_tokens(self, indices) -> int:
        return sum(self.rounds[m].end - self.rounds[m].start for m in indices)

    # -- the turn -------------------------------------------------------------

    def run_turn(self, question, max_decode_steps: int = 16) -> TurnResult:
        """Serve one question; returns the generated answer ids and metrics.

        ``question`` is a text string or a list of token ids (a separator
        is prepended for every round after the first).
        """
        if max_decode_steps <= 0:
            raise DomainError("max_decode_steps must be positive")
        model, config = self.model, self.model.config
        num_layers, lw = config.num_layers, self.watershed
        n = len(self.rounds)
        self.store.begin_turn(n)
        ledger = self.store.ledger

        q_body = tokenize(question) if isinstance(question, str) else list(question)
        q_ids = ([SEP_TOKEN] if n > 0 else []) + q_body
        if not q_ids:
            raise DomainError("question must contain at least one token")
        q_start = len(self.token_ids)
        q_positions = np.arange(q_start, q_start + len(q_ids), dtype=np.int64)
        current = Round(n, (q_start, q_start + len(q_ids)),
                        (q_start + len(q_ids), q_start + len(q_ids)))
        rounds_now = self.rounds + [current]

        # step 1: lower blocks on device, one batch if any strayed to host
        h2d_before = (ledger.h2d_events, ledger.h2d_bytes)
        lower_blocks = self.store.fetch_lower_all(n)
        lower_h2d_events = ledger.h2d_events - h2d_before[0]
        lower_h2d_bytes = ledger.h2d_bytes - h2d_before[1]

        working = model.new_cache()
        hist_tokens = self._assemble(working, 0, lw, lower_blocks)

        # step 2: lower-layer prefill, capturing scores in the last lower layer
        capture_layers = [lw - 1] if n > 0 else []
        hidden, captures = model.forward_range(
            working, 0, lw, tokens=q_ids, positions=q_positions,
            capture_layers=capture_layers,
        )

        # one-time selection from the last lower layer's capture
        selection_invocations = 0
        selection: SelectionResult | None = None
        distribution: RoundDistribution | None = None
        token_selection: TokenSelection | None = None
        kept: tuple[int, ...] = ()
        active_priors = self._active_priors(n)
        if n > 0:
            score_rows = captures[lw - 1]
            if self.mode == "round":
                raw = aggregate_round_attention(
                    score_rows, rounds_now, SEGMENT_QUESTION, n,
                    active_rounds=active_priors, row_offset=q_start,
                )
                distribution = normalize(
                    raw, layer=lw - 1, round_indices=active_priors,
                )
                selection = select(distribution, self.policy)
                selection_invocations = 1
                kept = selection.kept
            elif self.mode == "token":
                candidates = np.concatenate(
                    [self.rounds[m].token_indices() for m in active_priors]
                )
                token_selection = select_token_baseline(score_rows, candidates)
                selection_invocations = 1
            else:  # baseline attends everything
                kept = tuple(range(n))

        # step 3: upper blocks for the kept rounds, one batched fetch
        h2d_before = (ledger.h2d_events, ledger.h2d_bytes)
        if self.mode == "round":
            upper_blocks = self.store.fetch_upper(kept)
        else:
            upper_blocks = [self.store.get_block(m, "upper") for m in range(n)]
        upper_h2d_events = ledger.h2d_events - h2d_before[0]
        upper_h2d_bytes = ledger.h2d_bytes - h2d_before[1]

        allowed_fn = None
        if self.mode == "round" and self.attend_mode == "mask":
            # debug path: assemble everything, restrict by visibility mask
            upper_blocks = [self.store.get_block(m, "upper") for m in range(n)]
            mask_kept = kept

            def allowed_fn(layer, key_positions, _kept=mask_kept):
                return restricted_attention_mask(
                    _kept, rounds_now, q_start, key_positions,
                    upper=layer >= lw,
                )
        elif self.mode == "token" and n > 0:
            kept_token_array = np.asarray(token_selection.kept_tokens, dtype=np.int64)

            def allowed_fn(layer, key_positions, _kt=kept_token_array):
                if layer < lw:
                    return None
                key_positions = np.asarray(key_positions, dtype=np.int64)
                return (key_positions >= q_start) | np.isin(key_positions, _kt)

        upper_assembled = self._assemble(working, lw, num_layers, upper_blocks)

        # step 4: finish prefill on the upper layers
        hidden, _ = model.forward_range(
            working, lw, num_layers, hidden=hidden, positions=q_positions,
            allowed_fn=allowed_fn,
        )

        # step 5: greedy decode; every answer token gets its KV row appended
        answer_ids: list[int] = []
        cur, pos = SEP_TOKEN, q_start + len(q_ids)
        generated = 0
        while True:
            answer_ids.append(cur)
            hid, _ = model.forward_range(
                working, 0, num_layers, tokens=[cur], positions=[pos],
                allowed_fn=allowed_fn,
            )
            nxt = int(np.argmax(model.logits(hid)[0]))
            if nxt == EOT_TOKEN or generated >= max_decode_steps:
                break
            cur = nxt
            pos += 1
            generated += 1

        # turn-end bookkeeping: store the new round, one batched writeback
        new_count = len(q_ids) + len(answer_ids)
        new_positions = np.arange(q_start, q_start + new_count, dtype=np.int64)
        lower_payload = self._extract_new_rows(working, 0, lw, hist_tokens)
        upper_payload = self._extract_new_rows(working, lw, num_layers, upper_assembled)
        d2h_before = (ledger.d2h_events, ledger.d2h_bytes)
        self.store.put_round(
            n, lower_payload, upper_payload, new_positions, upper_on_device=True,
        )
        if self.mode == "round":
            self.store.writeback_upper(list(kept) + [n])
        d2h_events = ledger.d2h_events - d2h_before[0]
        d2h_bytes = ledger.d2h_bytes - d2h_before[1]

        a_span = (q_start + len(q_ids), q_start + new_count)
        self.rounds.append(Round(n, (q_start, q_start + len(q_ids)), a_span))
        self.token_ids.extend(q_ids + answer_ids)

        self.activity.register_round(n, n)
        dropped: list[int] = []
        if self.mode == "round":
            dropped = self.activity.update_and_drop(kept, n, len(self.rounds))
            for m in dropped:
                self.store.drop_upper(m)

        # cost shapes
        if self.mode == "baseline":
            kept_tokens = hist_tokens
        elif self.mode == "token":
            kept_tokens = len(token_selection.kept_tokens) if token_selection else 0
        else:
            kept_tokens = self._round_tokens(kept)
        shape = self._turn_shape(
            n, len(q_ids), len(answer_ids), hist_tokens, kept_tokens,
            upper_h2d_bytes, lower_h2d_bytes, d2h_bytes,
        )
        if self.mode == "token" and n > 0:
            per_layer_bytes = 2 * MODELED_ELEM_BYTES * kept_tokens * config.d_model
            upper_count = num_layers - lw
            token_stats = TokenTransferStats(
                kept_tokens=kept_tokens,
                segments=token_selection.segments,
                layer_touches=upper_count,
                h2d_events=token_selection.segments * upper_count,
                h2d_bytes=per_layer_bytes * upper_count,
            )
            shape.upper_h2d_bytes = float(token_stats.h2d_bytes)
        else:
            token_stats = None
        curves = simulate_costs(shape, self.cost_model)

        peak = 0
        if ledger.per_turn:
            peak = ledger.per_turn[-1].device_used_bytes
        metrics = TurnMetrics(
            round_index=n,
            mode=self.mode,
            policy=self.policy.kind if self.policy else self.mode,
            append_rows=len(q_ids),
            decode_steps=len(answer_ids),
            kept=kept,
            K=len(kept) if self.mode != "token" else 0,
            selection_invocations=selection_invocations,
            upper_h2d_events=upper_h2d_events,
            upper_h2d_bytes=upper_h2d_bytes,
            lower_h2d_events=lower_h2d_events,
            lower_h2d_bytes=lower_h2d_bytes,
            d2h_events=d2h_events,
            d2h_bytes=d2h_bytes,
            device_used_peak=peak,
            hist_tokens=hist_tokens,
            hist_tokens_attended=shape.hist_tokens_attended,
            total_cost_us=curves.total_us,
            curves=curves,
            shape=shape,
            distribution=distribution,
            token_stats=token_stats,
            dropped_rounds=tuple(dropped),
        )
        return TurnResult(answer_ids=answer_ids, metrics=metrics)

    def _turn_shape(self, n, n_q, n_a, hist_tokens, kept_tokens,
                    upper_h2d_bytes, lower_h2d_bytes, d2h_bytes) -> TurnShape:
        config = self.model.config
        num_layers, lw = config.num_layers, self.watershed

        def attended(base, rows, prior_rows):
            # sum over rows of (base + prior_rows + i + 1) for i in range(rows)
            return rows * (base + prior_rows) + rows * (rows + 1) / 2.0

        att_append = np.empty(num_layers)
        att_decode = np.empty(num_layers)
        upper_base = hist_tokens if self.mode == "baseline" else kept_tokens
        for l in range(num_layers):
            base = hist_tokens if l < lw else upper_base
            att_append[l] = attended(base, n_q, 0)
            att_decode[l] = attended(base, n_a, n_q)
        has_selection = self.mode in ("round", "token") and n > 0
        return TurnShape(
            num_layers=num_layers,
            d_model=config.d_model,
            append_rows=n_q,
            decode_steps=n_a,
            attended_append=att_append,
            attended_decode=att_decode,
            selection_layer=lw - 1 if has_selection else None,
            selection_macs=float(n_q * hist_tokens) if has_selection else 0.0,
            upper_h2d_bytes=float(upper_h2d_bytes),
            lower_h2d_bytes=float(lower_h2d_bytes),
            writeback_bytes=float(d2h_bytes),
            hist_tokens_attended=lw * hist_tokens + (num_layers - lw) * kept_tokens,
            kept_rounds=len(self.rounds) if self.mode == "baseline" else 0,
        )

    def run_conversation(self, questions, max_decode_steps: int = 16) -> list[TurnResult]:
        return [self.run_turn(q, max_decode_steps) for q in questions]

    def end_session(self) -> None:
        self.store.end_session()


# -- calibration and trace analysis -------------------------------------------


def analysis_round_index(conv: Conversation) -> int | None:
    """The round whose question drives the distribution analysis.

    The in-flight question when present, else the last completed round;
    None when no prior completed round would receive mass.
    """
    if conv.has_inflight and conv.T >= 1:
        return len(conv.rounds) - 1
    if conv.T >= 2:
        return conv.T - 1
    return None


def capture_all_layers(model: Model, conv: Conversation) -> dict[int, np.ndarray]:
    """Teacher-forced full-attention prefill capturing every layer's scores."""
    cache = model.new_cache()
    positions = np.arange(conv.num_tokens, dtype=np.int64)
    _, captures = model.forward_range(
        cache, 0, model.config.num_layers, tokens=conv.token_ids,
        positions=positions, capture_layers=range(model.config.num_layers),
    )
    return captures


def layer_distributions(matrices, rounds, current_round: int,
                        segment: str = SEGMENT_QUESTION) -> list[RoundDistribution]:
    """Per-layer normalized round distributions from full score matrices."""
    dists = []
    for l, mat in enumerate(matrices):
        raw = aggregate_round_attention(mat, rounds, segment, current_round)
        dist = normalize(raw, layer=l, segment=segment)
        dists.append(dist)
    return dists


def conversation_kl_curve(model: Model, conv: Conversation) -> KLCurve:
    n = analysis_round_index(conv)
    if n is None:
        raise DomainError("conversation has no prior completed round to analyze")
    captures = capture_all_layers(model, conv)
    matrices = [captures[l] for l in range(model.config.num_layers)]
    dists = layer_distributions(matrices, conv.rounds, n)
    return kl_curve([d.masses for d in dists])


def calibrate_watershed(model: Model, conversations, *, criterion: str = "max_drop",
                        tau: float = 0.1) -> WatershedResult:
    """Detect the watershed layer from full-attention prefills of a corpus."""
    curves = []
    for conv in conversations:
        if analysis_round_index(conv) is None:
            continue
        curves.append(conversation_kl_curve(model, conv))
    if not curves:
        raise DomainError("calibration corpus has no multi-round conversation")
    return detect_watershed(curves, criterion=criterion, tau=tau)


def capture_trace(model: Model, conv: Conversation):
    """Full-prefill captures in the attention-trace exchange format."""
    from .conversation import AttentionTrace

    captures = capture_all_layers(model, conv)
    matrices = np.stack(
        [captures[l] for l in range(model.config.num_layers)]
    ).astype(np.float32)
    return AttentionTrace(
        num_layers=model.config.num_layers,
        seq_len=conv.num_tokens,
        rounds=conv.rounds,
        matrices=matrices,
    )
