"""Two-tier KV block store with batched transfers and a byte-accurate ledger.

Each round's KV cache is split at the watershed layer into a lower block
(device-resident by default) and an upper block (offloaded to host, fetched
on demand).  Blocks are addressed by (round, half) and move monolithically;
there is no sub-block access, which enforces round granularity by
construction.  Byte accounting models 2-byte elements (the serving dtype)
regardless of the engine's compute dtype.

Also home to the closed-form KV memory model: original vs round-selective
footprint and their ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConsistencyError, DomainError

MODELED_ELEM_BYTES = 2  # accounting dtype (2-byte floats), independent of compute dtype
MIB = 1024 * 1024
DEFAULT_DEVICE_CAPACITY = 64 * MIB

TIER_DEVICE = "device"
TIER_HOST = "host"
TIER_DROPPED = "dropped"

LOWER = "lower"
UPPER = "upper"


def block_nbytes(tokens: int, hidden: int, layers: int) -> int:
    """Modeled block size: 2 tensors (K, V) x 2 bytes x tokens x hidden x layers."""
    return 2 * MODELED_ELEM_BYTES * tokens * hidden * layers


@dataclass
class KVBlock:
    round_index: int
    half: str  # LOWER or UPPER
    layer_lo: int
    layer_hi: int
    tokens: int
    byte_size: int
    payload: np.ndarray | None  # (layers, 2, tokens, d_model) float32
    positions: np.ndarray | None  # absolute token positions
    tier: str = TIER_HOST


@dataclass
class TurnTransferRecord:
    turn: int
    h2d_events: int = 0
    h2d_bytes: int = 0
    d2h_events: int = 0
    d2h_bytes: int = 0
    device_used_bytes: int = 0


@dataclass
class TransferLedger:
    h2d_events: int = 0
    h2d_bytes: int = 0
    d2h_events: int = 0
    d2h_bytes: int = 0
    per_turn: list[TurnTransferRecord] = field(default_factory=list)

    def begin_turn(self, turn: int) -> None:
        self.per_turn.append(TurnTransferRecord(turn=turn))

    def _current(self) -> TurnTransferRecord:
        if not self.per_turn:
            self.begin_turn(0)
        return self.per_turn[-1]

    def record_h2d(self, nbytes: int) -> None:
        self.h2d_events += 1
        self.h2d_bytes += nbytes
        rec = self._current()
        rec.h2d_events += 1
        rec.h2d_bytes += nbytes

    def record_d2h(self, nbytes: int) -> None:
        self.d2h_events += 1
        self.d2h_bytes += nbytes
        rec = self._current()
        rec.d2h_events += 1
        rec.d2h_bytes += nbytes

    def note_device_usage(self, used_bytes: int) -> None:
        rec = self._current()
        rec.device_used_bytes = max(rec.device_used_bytes, used_bytes)

    def report_rows(self) -> list[dict]:
        return [
            {
                "turn": rec.turn,
                "h2d_events": rec.h2d_events,
                "h2d_bytes": rec.h2d_bytes,
                "d2h_events": rec.d2h_events,
                "d2h_bytes": rec.d2h_bytes,
                "device_used_bytes": rec.device_used_bytes,
            }
            for rec in self.per_turn
        ]


class TieredStore:
    """Per-conversation block store across a device and a host tier."""

    def __init__(self, num_layers: int, watershed: int, d_model: int, *,
                 device_capacity: int = DEFAULT_DEVICE_CAPACITY,
                 evict_lower_on_pressure: bool = False,
                 conversation_id: str = "conv0"):
        if not 0 < watershed < num_layers:
            raise DomainError(
                f"watershed must satisfy 0 < L_w < L, got {watershed} of {num_layers}"
            )
        self.num_layers = num_layers
        self.watershed = watershed
        self.d_model = d_model
        self.device_capacity = device_capacity
        self.evict_lower_on_pressure = evict_lower_on_pressure
        self.conversation_id = conversation_id
        self.blocks: dict[tuple[int, str], KVBlock] = {}
        self.ledger = TransferLedger()
        self.device_used_bytes = 0

    # -- internals ---------------------------------------------------------

    def _get(self, round_index: int, half: str) -> KVBlock:
        try:
            return self.blocks[(round_index, half)]
        except KeyError:
            raise ConsistencyError(
                f"round {round_index} has no {half} block"
            ) from None

    def _ensure_device_room(self, incoming: int) -> None:
        if self.device_used_bytes + incoming <= self.device_capacity:
            return
        if self.evict_lower_on_pressure:
            self._evict_lower(incoming)
            if self.device_used_bytes + incoming <= self.device_capacity:
                return
        raise CapacityError(
            f"device tier needs {incoming} bytes, "
            f"{self.device_capacity - self.device_used_bytes} available"
        )

    def _evict_lower(self, needed: int) -> None:
        """Oldest-round lower blocks spill to host until the request fits."""
        movable = sorted(
            (b for b in self.blocks.values()
             if b.half == LOWER and b.tier == TIER_DEVICE),
            key=lambda b: b.round_index,
        )
        spilled = 0
        for block in movable:
            if self.device_used_bytes + needed <= self.device_capacity:
                break
            block.tier = TIER_HOST
            self.device_used_bytes -= block.byte_size
            spilled += block.byte_size
        if spilled:
            self.ledger.record_d2h(spilled)

    def _move_to_device(self, blocks: list[KVBlock]) -> None:
        pending = [b for b in blocks if b.tier == TIER_HOST]
        if not pending:
            return
        total = sum(b.byte_size for b in pending)
        self._ensure_device_room(total)
        for block in pending:
            block.tier = TIER_DEVICE
        self.device_used_bytes += total
        self.ledger.record_h2d(total)
        self.ledger.note_device_usage(self.device_used_bytes)

    # -- public surface ----------------------------------------------------

    def begin_turn(self, turn: int) -> None:
        self.ledger.begin_turn(turn)

    def has_round(self, round_index: int) -> bool:
        return (round_index, LOWER) in self.blocks

    def put_round(self, round_index: int, lower_payload: np.ndarray,
                  upper_payload: np.ndarray, positions: np.ndarray, *,
                  upper_on_device: bool = False) -> tuple[KVBlock, KVBlock]:
        """Store one round's split KV cache.

        The lower block lands on the device tier; the upper block is
        written to host as one device-to-host event unless
        ``upper_on_device`` says it was just computed on device and will
        be written back later in the turn.
        """
        if self.has_round(round_index):
            raise ConsistencyError(f"round {round_index} already stored")
        lower_payload = np.asarray(lower_payload, dtype=np.float32)
        upper_payload = np.asarray(upper_payload, dtype=np.float32)
        tokens = lower_payload.shape[2]
        expect_lower = (self.watershed, 2, tokens, self.d_model)
        expect_upper = (self.num_layers - self.watershed, 2, tokens, self.d_model)
        if lower_payload.shape != expect_lower:
            raise DomainError(
                f"lower payload shape {lower_payload.shape}, expected {expect_lower}"
            )
        if upper_payload.shape != expect_upper:
            raise DomainError(
                f"upper payload shape {upper_payload.shape}, expected {expect_upper}"
            )
        positions = np.asarray(positions, dtype=np.int64)

        lower = KVBlock(
            round_index=round_index, half=LOWER, layer_lo=0, layer_hi=self.watershed,
            tokens=tokens, byte_size=block_nbytes(tokens, self.d_model, self.watershed),
            payload=lower_payload, positions=positions, tier=TIER_HOST,
        )
        upper = KVBlock(
            round_index=round_index, half=UPPER, layer_lo=self.watershed,
            layer_hi=self.num_layers, tokens=tokens,
            byte_size=block_nbytes(tokens, self.d_model, self.num_layers - self.watershed),
            payload=upper_payload, positions=positions, tier=TIER_HOST,
        )
        self._ensure_device_room(lower.byte_size)
        lower.tier = TIER_DEVICE
        self.device_used_bytes += lower.byte_size

        if upper_on_device:
            self._ensure_device_room(upper.byte_size)
            upper.tier = TIER_DEVICE
            self.device_used_bytes += upper.byte_size
        else:
            self.ledger.record_d2h(upper.byte_size)  # monolithic host write

        self.blocks[(round_index, LOWER)] = lower
        self.blocks[(round_index, UPPER)] = upper
        self.ledger.note_device_usage(self.device_used_bytes)
        return lower, upper

    def fetch_lower_all(self, upto_round: int) -> list[KVBlock]:
        """Device-resident lower blocks for rounds 0..upto_round-1.

        Host-resident stragglers move in one batched host-to-device event;
        already-resident blocks are untouched.
        """
        blocks = [self._get(m, LOWER) for m in range(upto_round)]
        self._move_to_device(blocks)
        return blocks

    def fetch_upper(self, selected) -> list[KVBlock]:
        """Device-resident upper blocks for the selected rounds (one batch)."""
        blocks = []
        for m in selected:
            block = self._get(m, UPPER)
            if block.tier == TIER_DROPPED:
                raise ConsistencyError(f"round {m} upper block was dropped")
            blocks.append(block)
        self._move_to_device(blocks)
        return blocks

    def writeback_upper(self, rounds) -> None:
        """Move the given rounds' upper blocks to host as one batched event."""
        moving = []
        for m in rounds:
            block = self._get(m, UPPER)
            if block.tier == TIER_DEVICE:
                moving.append(block)
        if not moving:
            return
        total = sum(b.byte_size for b in moving)
        for block in moving:
            block.tier = TIER_HOST
            self.device_used_bytes -= block.byte_size
        self.ledger.record_d2h(total)

    def drop_upper(self, round_index: int) -> None:
        block = self._get(round_index, UPPER)
        if block.tier == TIER_DEVICE:
            self.device_used_bytes -= block.byte_size
        block.tier = TIER_DROPPED
        block.payload = None

    def end_session(self) -> None:
        """Write every device-resident block back to host (one batched event)."""
        moving = [b for b in self.blocks.values() if b.tier == TIER_DEVICE]
        if not moving:
            return
        total = sum(b.byte_size for b in moving)
        for block in moving:
            block.tier = TIER_HOST
            self.device_used_bytes -= block.byte_size
        self.ledger.record_d2h(total)

    def tier_of(self, round_index: int, half: str) -> str:
        return self._get(round_index, half).tier

    def get_block(self, round_index: int, half: str) -> KVBlock:
        return self._get(round_index, half)


# -- closed-form memory model ------------------------------------------------


def memory_ratio(num_layers: int, watershed: int, kept_rounds: float,
                 total_rounds: float) -> float:
    """Selective-to-original KV footprint ratio:
    L_w/L + (K/T) * (1 - L_w/L).
    """
    if not 0 < watershed < num_layers:
        raise DomainError("watershed must satisfy 0 < L_w < L")
    if total_rounds < 1:
        raise DomainError("total rounds must be >= 1")
    if not 0 <= kept_rounds <= total_rounds:
        raise DomainError("kept rounds must satisfy 0 <= K <= T")
    lw_frac = watershed / num_layers
    return lw_frac + (kept_rounds / total_rounds) * (1.0 - lw_frac)


def save_percent(num_layers: int, watershed: int) -> int:
    """Whole-percent memory saving at K/T -> 0, i.e. round(100*(1 - L_w/L)).

    Exact integer arithmetic with half-away-from-zero rounding (the 80/18
    configuration sits exactly on 77.5%).
    """
    if not 0 < watershed < num_layers:
        raise DomainError("watershed must satisfy 0 < L_w < L")
    return (200 * (num_layers - watershed) + num_layers) // (2 * num_layers)


def footprint_report(batch: int, seq_len: int, hidden: int, num_layers: int,
                     watershed: int, kept_rounds: float, total_rounds: float) -> dict:
    """Original and round-selective KV byte totals plus their ratio.

    Original: 2 (K, V) * 2 bytes * B * S * H * L.  Selective: full lower
    layers plus the K/T fraction of the upper layers.
    """
    for name, value in (("batch", batch), ("seq_len", seq_len), ("hidden", hidden)):
        if value < 1:
            raise DomainError(f"{name} must be >= 1")
    ratio = memory_ratio(num_layers, watershed, kept_rounds, total_rounds)
    m_orig = 4.0 * batch * seq_len * hidden * num_layers
    m_round = (
        4.0 * batch * seq_len * hidden * watershed
        + 4.0 * batch * (kept_rounds / total_rounds) * seq_len * hidden
        * (num_layers - watershed)
    )
    return {
        "m_orig_bytes": m_orig,
        "m_round_bytes": m_round,
        "ratio": m_round / m_orig,
        "closed_form_ratio": ratio,
        "save_percent_at_k0": save_percent(num_layers, watershed),
    }
