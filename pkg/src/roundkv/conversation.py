"""Multi-turn conversation parsing, byte-level tokenization, and attention-trace I/O.

A conversation is an ordered list of question/answer rounds over a single
token stream.  Tokenization is byte-level (one token per UTF-8 byte) so the
mapping is deterministic and dependency-free; two ids above the byte range
are reserved for the segment separator and the end-of-text marker.

Attention traces pair a JSON header (layer count, sequence length, round
boundaries) with a binary file of row-major float32 score matrices, one per
layer.  The loader validates causality and row normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, TraceError

BYTE_VOCAB = 256
SEP_TOKEN = 256  # separates q from a and round from round; owned by the span it precedes
EOT_TOKEN = 257  # greedy decode stops here
VOCAB_SIZE = 258

# load_attention_trace rejects rows whose causal-prefix sum strays past this
ROW_SUM_TOLERANCE = 1e-3


@dataclass(frozen=True)
class Token:
    id: int
    position: int


@dataclass(frozen=True)
class Round:
    """One question/answer pair; spans are half-open token-index ranges."""

    index: int
    q_span: tuple[int, int]
    a_span: tuple[int, int]

    @property
    def completed(self) -> bool:
        return self.a_span[1] > self.a_span[0]

    @property
    def q_len(self) -> int:
        return self.q_span[1] - self.q_span[0]

    @property
    def a_len(self) -> int:
        return self.a_span[1] - self.a_span[0]

    @property
    def start(self) -> int:
        return self.q_span[0]

    @property
    def end(self) -> int:
        return self.a_span[1] if self.completed else self.q_span[1]

    def token_indices(self) -> np.ndarray:
        """All token indices of the round (question, then answer)."""
        return np.arange(self.start, self.end)


@dataclass
class Conversation:
    rounds: list[Round] = field(default_factory=list)
    tokens: list[Token] = field(default_factory=list)

    @property
    def T(self) -> int:
        """Number of completed rounds."""
        return sum(1 for r in self.rounds if r.completed)

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def has_inflight(self) -> bool:
        return bool(self.rounds) and not self.rounds[-1].completed

    @property
    def token_ids(self) -> list[int]:
        return [t.id for t in self.tokens]

    def question_texts(self) -> list[str]:
        """Raw question texts reconstructed from spans (separators stripped)."""
        out = []
        ids = self.token_ids
        for r in self.rounds:
            span_ids = ids[r.q_span[0] : r.q_span[1]]
            out.append(decode_text(span_ids))
        return out


def tokenize(text: str) -> list[int]:
    """Map text to one token id per UTF-8 byte (ids in [0, 256))."""
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> bytes:
    """Inverse of byte-level tokenization; reserved ids are skipped."""
    return bytes(i for i in ids if 0 <= i < BYTE_VOCAB)


def decode_text(ids) -> str:
    return decode_tokens(ids).decode("utf-8", errors="replace")


def _normalize_messages(doc) -> list[dict]:
    if isinstance(doc, (bytes, str)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"conversation document is not valid JSON: {exc}") from exc
    if isinstance(doc, dict) and "conversations" in doc:
        doc = doc["conversations"]
    if not isinstance(doc, list):
        raise ParseError("conversation document must be a list of messages")
    return doc


def parse_conversation(doc) -> Conversation:
    """Parse a ShareGPT-shaped document into rounds and a token stream.

    ``doc`` may be raw JSON bytes/str, a list of ``{"from", "value"}``
    messages, or a ``{"conversations": [...]}`` wrapper.  Consecutive
    (human, gpt) pairs become completed rounds; a trailing human message
    becomes the in-flight question.  A leading system message is folded
    into round 0's question.
    """
    messages = _normalize_messages(doc)

    system_text: str | None = None
    pairs: list[tuple[str, str | None]] = []  # (q_text, a_text or None)
    expecting = "human"
    for i, msg in enumerate(messages):
        if not isinstance(msg, dict) or "from" not in msg or "value" not in msg:
            raise ParseError(f"message {i}: expected an object with 'from' and 'value'")
        role, value = msg["from"], msg["value"]
        if not isinstance(value, str) or value == "":
            raise ParseError(f"message {i}: empty or non-string value")
        if role == "system":
            if i != 0:
                raise ParseError(f"message {i}: system message only allowed first")
            system_text = value
            continue
        if role not in ("human", "gpt"):
            raise ParseError(f"message {i}: unknown role {role!r}")
        if role != expecting:
            raise ParseError(
                f"message {i}: expected a {expecting!r} message, got {role!r}"
            )
        if role == "human":
            pairs.append((value, None))
            expecting = "gpt"
        else:
            q_text, _ = pairs[-1]
            pairs[-1] = (q_text, value)
            expecting = "human"

    rounds: list[Round] = []
    token_ids: list[int] = []
    for m, (q_text, a_text) in enumerate(pairs):
        q_start = len(token_ids)
        if m > 0:
            token_ids.append(SEP_TOKEN)
        if m == 0 and system_text is not None:
            token_ids.extend(tokenize(system_text))
            token_ids.append(SEP_TOKEN)
        token_ids.extend(tokenize(q_text))
        q_end = len(token_ids)
        a_start = a_end = q_end
        if a_text is not None:
            token_ids.append(SEP_TOKEN)
            token_ids.extend(tokenize(a_text))
            a_end = len(token_ids)
        rounds.append(Round(m, (q_start, q_end), (a_start, a_end)))

    tokens = [Token(tid, pos) for pos, tid in enumerate(token_ids)]
    return Conversation(rounds=rounds, tokens=tokens)


def question_texts_from_doc(doc) -> list[str]:
    """Human-message texts in order, for replaying a conversation's questions.

    Validates the document first; a leading system message is folded into
    the first question, matching parse_conversation's round-0 treatment.
    """
    parse_conversation(doc)  # raises on malformed structure
    messages = _normalize_messages(doc)
    texts: list[str] = []
    system_text = None
    for msg in messages:
        if msg["from"] == "system":
            system_text = msg["value"]
        elif msg["from"] == "human":
            if system_text is not None:
                texts.append(system_text + "\n\n" + msg["value"])
                system_text = None
            else:
                texts.append(msg["value"])
    return texts


@dataclass
class AttentionTrace:
    """Per-layer head-reduced token-by-token score matrices plus round spans."""

    num_layers: int
    seq_len: int
    rounds: list[Round]
    matrices: np.ndarray  # (L, S, S) float32, causal, rows normalized

    def layer(self, l: int) -> np.ndarray:
        return self.matrices[l]


def _validate_matrices(matrices: np.ndarray) -> None:
    num_layers, seq_len, _ = matrices.shape
    for l in range(num_layers):
        mat = matrices[l]
        if np.any(mat < 0):
            row = int(np.argwhere(mat < 0)[0][0])
            raise TraceError(f"layer {l} row {row}: negative score")
        upper = np.triu(mat, k=1)
        if np.any(upper != 0.0):
            row = int(np.argwhere(upper != 0.0)[0][0])
            raise TraceError(f"layer {l} row {row}: nonzero score above the diagonal")
        row_sums = mat.sum(axis=1, dtype=np.float64)
        bad = np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE
        if np.any(bad):
            row = int(np.argmax(bad))
            raise TraceError(
                f"layer {l} row {row}: row sums to {row_sums[row]:.6f}, expected 1"
            )


def _rounds_from_boundaries(boundaries) -> list[Round]:
    rounds = []
    for m, entry in enumerate(boundaries):
        qs, qe, as_, ae = (int(x) for x in entry)
        rounds.append(Round(m, (qs, qe), (as_, ae)))
    return rounds


def load_attention_trace(header, payload: bytes) -> AttentionTrace:
    """Build a trace from a JSON header (dict/str/bytes) and raw float32 payload.

    The payload must be exactly ``layers * seq_len**2 * 4`` little-endian
    bytes; each matrix must be causal with rows summing to 1.
    """
    if isinstance(header, (bytes, str)):
        try:
            header = json.loads(header)
        except json.JSONDecodeError as exc:
            raise TraceError(f"trace header is not valid JSON: {exc}") from exc
    try:
        num_layers = int(header["layers"])
        seq_len = int(header["seq_len"])
        boundaries = header["round_boundaries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceError(f"trace header missing or malformed field: {exc}") from exc

    expected = num_layers * seq_len * seq_len * 4
    if len(payload) != expected:
        raise TraceError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )
    matrices = (
        np.frombuffer(payload, dtype="<f4")
        .reshape(num_layers, seq_len, seq_len)
        .copy()
    )
    _validate_matrices(matrices)
    return AttentionTrace(
        num_layers=num_layers,
        seq_len=seq_len,
        rounds=_rounds_from_boundaries(boundaries),
        matrices=matrices,
    )


def trace_header_dict(trace: AttentionTrace) -> dict:
    return {
        "layers": trace.num_layers,
        "seq_len": trace.seq_len,
        "round_boundaries": [
            [r.q_span[0], r.q_span[1], r.a_span[0], r.a_span[1]] for r in trace.rounds
        ],
    }


def save_attention_trace(trace: AttentionTrace, base: Path) -> tuple[Path, Path]:
    """Write ``<base>.trace.json`` + ``<base>.trace.bin``; returns both paths."""
    base = Path(base)
    header_path = base.with_name(base.name + ".trace.json")
    payload_path = base.with_name(base.name + ".trace.bin")
    header = trace_header_dict(trace)
    header["data_file"] = payload_path.name
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    payload_path.write_bytes(
        np.ascontiguousarray(trace.matrices, dtype="<f4").tobytes()
    )
    return header_path, payload_path


def load_attention_trace_file(header_path: Path) -> AttentionTrace:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise TraceError(f"cannot read trace header {header_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise TraceError(f"trace header {header_path} is not valid JSON: {exc}") from exc
    data_name = header.get("data_file")
    if data_name is None:
        raise TraceError(f"trace header {header_path} has no 'data_file' field")
    payload_path = header_path.parent / data_name
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise TraceError(f"cannot read trace payload {payload_path}: {exc}") from exc
    return load_attention_trace(header, payload)
