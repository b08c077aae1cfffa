"""
Task Tokenizers Module for the event-grounding toolkit.

Timestamps and scores have their own 13-symbol vocabularies
(ten digits, the dot, <sep> and <sync>) and a fixed-width digit format:
timestamps are written as DDDD.D (6 tokens) and scores as D.D (3 tokens).
Text goes through a byte-level toy tokenizer whose vocabulary also holds
<sync> (end of a text segment) and <eos>.
"""

from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.errors import SequenceParseError, TokenRangeError
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

DIGIT_SYMBOLS = tuple(str(d) for d in range(10))
DOT = "."
SEP = "<sep>"
SYNC = "<sync>"
EOS = "<eos>"

TIME_WIDTH = 6
SCORE_WIDTH = 3
TIME_MAX = Decimal("9999.9")
SCORE_MAX = Decimal("9.9")
_ONE_DECIMAL = Decimal("0.1")


class TaskTag(str, Enum):
    """Task a token belongs to; decides its embedding table and decoding head."""
    VISUAL = "visual"
    TIME = "time"
    SCORE = "score"
    TEXT = "text"


class TaskVocab:
    """
    An ordered symbol list; a symbol's id is its position.
    """

    def __init__(self, kind: TaskTag, symbols: Sequence[str]):
        self.kind = TaskTag(kind)
        self.symbols: Tuple[str, ...] = tuple(symbols)
        self._ids = {symbol: index for index, symbol in enumerate(self.symbols)}
        if len(self._ids) != len(self.symbols):
            raise ValueError(f"Duplicate symbols in {self.kind.value} vocabulary")
        if SYNC not in self._ids:
            raise ValueError(f"{self.kind.value} vocabulary must contain {SYNC}")

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, token_id: int) -> bool:
        return isinstance(token_id, int) and 0 <= token_id < len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskVocab) and self.kind == other.kind and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash((self.kind, self.symbols))

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise KeyError(f"Symbol {symbol!r} is not in the {self.kind.value} vocabulary") from None

    def symbol_of(self, token_id: int) -> str:
        if token_id not in self:
            raise KeyError(f"Id {token_id} is not in the {self.kind.value} vocabulary")
        return self.symbols[token_id]

    @property
    def sync_id(self) -> int:
        return self._ids[SYNC]

    @property
    def sep_id(self) -> Optional[int]:
        return self._ids.get(SEP)

    @property
    def eos_id(self) -> Optional[int]:
        return self._ids.get(EOS)

    @property
    def digit_ids(self) -> Tuple[int, ...]:
        return tuple(self._ids[d] for d in DIGIT_SYMBOLS if d in self._ids)

    @property
    def dot_id(self) -> Optional[int]:
        return self._ids.get(DOT)

    def dump(self, path: Union[str, Path]) -> None:
        """Write one symbol per line; the line number is the id."""
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path], kind: TaskTag) -> "TaskVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(kind, lines)


def _byte_symbol(value: int) -> str:
    return f"<0x{value:02X}>"


TIME_VOCAB = TaskVocab(TaskTag.TIME, DIGIT_SYMBOLS + (DOT, SEP, SYNC))
SCORE_VOCAB = TaskVocab(TaskTag.SCORE, DIGIT_SYMBOLS + (DOT, SEP, SYNC))
TEXT_VOCAB = TaskVocab(TaskTag.TEXT, tuple(_byte_symbol(b) for b in range(256)) + (SYNC, EOS))

VOCABS = {
    TaskTag.TIME: TIME_VOCAB,
    TaskTag.SCORE: SCORE_VOCAB,
    TaskTag.TEXT: TEXT_VOCAB,
}


class TokenSeq(BaseModel):
    """
    A token sequence where every token carries its task tag.

    Visual tokens have no vocabulary; their id is the index of the slot
    embedding they stand for.
    """
    model_config = ConfigDict(frozen=True)

    ids: Tuple[int, ...] = Field(default_factory=tuple, description="Token ids")
    tags: Tuple[TaskTag, ...] = Field(default_factory=tuple, description="Task tag per token")

    @model_validator(mode='after')
    def validate_parallel(self):
        if len(self.ids) != len(self.tags):
            raise ValueError(f"ids ({len(self.ids)}) and tags ({len(self.tags)}) differ in length")
        for offset, (token_id, tag) in enumerate(zip(self.ids, self.tags)):
            if tag is TaskTag.VISUAL:
                if token_id < 0:
                    raise ValueError(f"visual slot index must be non-negative at offset {offset}")
            elif token_id not in VOCABS[tag]:
                raise ValueError(f"id {token_id} is not valid in the {tag.value} vocabulary at offset {offset}")
        return self

    @classmethod
    def of(cls, tag: TaskTag, ids: Iterable[int]) -> "TokenSeq":
        ids = tuple(ids)
        return cls(ids=ids, tags=(TaskTag(tag),) * len(ids))

    @classmethod
    def concat(cls, parts: Iterable["TokenSeq"]) -> "TokenSeq":
        ids: List[int] = []
        tags: List[TaskTag] = []
        for part in parts:
            ids.extend(part.ids)
            tags.extend(part.tags)
        # parts are already validated
        return cls.model_construct(ids=tuple(ids), tags=tuple(tags))

    def append(self, token_id: int, tag: TaskTag) -> "TokenSeq":
        """Copy with one more token; the caller guarantees the id is valid for the tag."""
        return TokenSeq.model_construct(ids=self.ids + (token_id,), tags=self.tags + (tag,))

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq.model_construct(ids=self.ids + other.ids, tags=self.tags + other.tags)

    def __getitem__(self, item: slice) -> "TokenSeq":
        if not isinstance(item, slice):
            raise TypeError("TokenSeq supports slicing only; use .ids/.tags for single tokens")
        return TokenSeq.model_construct(ids=self.ids[item], tags=self.tags[item])

    def symbols(self) -> List[str]:
        out = []
        for token_id, tag in zip(self.ids, self.tags):
            out.append(f"v{token_id}" if tag is TaskTag.VISUAL else VOCABS[tag].symbol_of(token_id))
        return out

    def render(self) -> str:
        """Display form: digits and the dot in angle brackets, specials as-is."""
        parts = []
        for symbol in self.symbols():
            parts.append(symbol if symbol.startswith("<") else f"<{symbol}>")
        return "".join(parts)


def _round_half_up(value: float, limit: Decimal, what: str) -> Decimal:
    try:
        exact = Decimal(repr(float(value)))
    except (InvalidOperation, ValueError, TypeError):
        raise TokenRangeError(f"{what} {value!r} is not a number") from None
    if not exact.is_finite():
        raise TokenRangeError(f"{what} {value!r} is not finite; representable interval is [0, {limit}]")
    rounded = exact.quantize(_ONE_DECIMAL, rounding=ROUND_HALF_UP)
    if exact < 0 or rounded > limit:
        raise TokenRangeError(f"{what} {value!r} is outside the representable interval [0, {limit}]")
    # -0.0 must not print a sign
    return rounded.copy_abs()


def format_timestamp(x: float) -> str:
    """
    Format seconds as the 6-character DDDD.D string, rounding half-up.

    >>> format_timestamp(125.37)
    '0125.4'
    """
    return format(_round_half_up(x, TIME_MAX, "timestamp"), "06.1f")


def format_score(s: float) -> str:
    """Format a score as the 3-character D.D string, rounding half-up."""
    return format(_round_half_up(s, SCORE_MAX, "score"), "03.1f")


def round_one_decimal(value: float) -> float:
    """Half-up rounding to one decimal, the same rule the formatters apply."""
    return float(Decimal(repr(float(value))).quantize(_ONE_DECIMAL, rounding=ROUND_HALF_UP))


def _encode_values(values: Sequence[float], vocab: TaskVocab, formatter, terminal: bool) -> TokenSeq:
    ids: List[int] = []
    for index, value in enumerate(values):
        if index:
            ids.append(vocab.sep_id)
        ids.extend(vocab.id_of(ch) for ch in formatter(value))
    if terminal:
        ids.append(vocab.sync_id)
    return TokenSeq.of(vocab.kind, ids)


def encode_time_list(xs: Sequence[float], terminal: bool = True) -> TokenSeq:
    """
    Encode timestamps as 6-token values joined by <sep>, optionally closed by <sync>.

    An empty list with terminal=True gives the lone <sync> placeholder.
    """
    return _encode_values(xs, TIME_VOCAB, format_timestamp, terminal)


def encode_score_list(ss: Sequence[float], terminal: bool = True) -> TokenSeq:
    """Encode scores as 3-token values joined by <sep>, optionally closed by <sync>."""
    return _encode_values(ss, SCORE_VOCAB, format_score, terminal)


def encode_frame_time(x: float) -> TokenSeq:
    """The 6 digit/dot tokens of a frame timestamp, without <sep> or <sync>."""
    return _encode_values([x], TIME_VOCAB, format_timestamp, terminal=False)


class ValueParser:
    """
    Parses a fixed-width value segment back into numbers.

    In lenient mode malformed values are skipped and described in
    ``diagnostics`` instead of raising.
    """

    def __init__(self, vocab: TaskVocab, width: int, lenient: bool = False, require_terminal: bool = True):
        self.vocab = vocab
        self.width = width
        self.lenient = lenient
        self.require_terminal = require_terminal
        self.diagnostics: List[str] = []

    def _fail(self, message: str, offset: int) -> None:
        if not self.lenient:
            raise SequenceParseError(message, offset)
        self.diagnostics.append(f"{message} (at offset {offset})")

    def _value_of(self, chars: List[str], start: int) -> Optional[float]:
        dot_at = self.width - 2
        if len(chars) != self.width:
            self._fail(f"{self.vocab.kind.value} value has {len(chars)} tokens, expected {self.width}", start)
            return None
        for position, ch in enumerate(chars):
            if position == dot_at and ch != DOT:
                self._fail(f"expected '.' at value position {position}", start + position)
                return None
            if position != dot_at and ch not in DIGIT_SYMBOLS:
                self._fail(f"expected a digit at value position {position}", start + position)
                return None
        return float("".join(chars))

    def parse(self, ids: Sequence[int], base_offset: int = 0) -> List[float]:
        values: List[float] = []
        chars: List[str] = []
        value_start = base_offset
        terminated = False

        for index, token_id in enumerate(ids):
            offset = base_offset + index
            if token_id not in self.vocab:
                self._fail(f"id {token_id} is not in the {self.vocab.kind.value} vocabulary", offset)
                continue
            symbol = self.vocab.symbol_of(token_id)

            if symbol == SYNC:
                if chars or values:
                    value = self._value_of(chars, value_start)
                    if value is not None:
                        values.append(value)
                if index != len(ids) - 1:
                    self._fail("tokens after the segment terminal", offset + 1)
                terminated = True
                break

            if symbol == SEP:
                value = self._value_of(chars, value_start)
                if value is not None:
                    values.append(value)
                chars = []
                value_start = offset + 1
                continue

            chars.append(symbol)

        if not terminated:
            if self.require_terminal:
                self._fail(f"{self.vocab.kind.value} segment is missing its {SYNC} terminal", base_offset + len(ids))
                if chars:
                    value = self._value_of(chars, value_start) if len(chars) == self.width else None
                    if value is not None:
                        values.append(value)
            elif chars or values:
                value = self._value_of(chars, value_start)
                if value is not None:
                    values.append(value)

        if self.diagnostics:
            for message in self.diagnostics:
                logger.warning(f"Lenient {self.vocab.kind.value} decode: {message}")
        return values


def _check_tags(seq: TokenSeq, tag: TaskTag) -> None:
    for offset, t in enumerate(seq.tags):
        if t is not tag:
            raise SequenceParseError(f"expected a {tag.value} token, found {t.value}", offset)


class DecodedValues(BaseModel):
    """Values read from a time or score stream, with what lenient decoding skipped."""
    model_config = ConfigDict(frozen=True)

    values: Tuple[float, ...] = Field(default_factory=tuple)
    diagnostics: Tuple[str, ...] = Field(default_factory=tuple)


def _decode_detailed(seq: TokenSeq, tag: TaskTag, lenient: bool, require_terminal: bool) -> DecodedValues:
    _check_tags(seq, tag)
    width = TIME_WIDTH if tag is TaskTag.TIME else SCORE_WIDTH
    parser = ValueParser(VOCABS[tag], width, lenient, require_terminal)
    values = parser.parse(seq.ids)
    return DecodedValues(values=tuple(values), diagnostics=tuple(parser.diagnostics))


def decode_time_list_detailed(seq: TokenSeq, lenient: bool = False, require_terminal: bool = True) -> DecodedValues:
    """
    Inverse of encode_time_list, keeping the lenient-mode diagnostics.

    Args:
        seq: Time-tagged tokens
        lenient: Skip malformed values and describe them instead of raising SequenceParseError
        require_terminal: Demand the closing <sync>

    Returns:
        DecodedValues with the seconds values and one diagnostic per skipped problem
    """
    return _decode_detailed(seq, TaskTag.TIME, lenient, require_terminal)


def decode_score_list_detailed(seq: TokenSeq, lenient: bool = False, require_terminal: bool = True) -> DecodedValues:
    """Inverse of encode_score_list, keeping the lenient-mode diagnostics."""
    return _decode_detailed(seq, TaskTag.SCORE, lenient, require_terminal)


def decode_time_list(seq: TokenSeq, lenient: bool = False, require_terminal: bool = True) -> List[float]:
    """Inverse of encode_time_list; the values of decode_time_list_detailed."""
    return list(decode_time_list_detailed(seq, lenient, require_terminal).values)


def decode_score_list(seq: TokenSeq, lenient: bool = False, require_terminal: bool = True) -> List[float]:
    """Inverse of encode_score_list."""
    return list(decode_score_list_detailed(seq, lenient, require_terminal).values)


def parse_display(text: str, tag: TaskTag) -> TokenSeq:
    """
    Read a rendered token stream such as ``<0><1><.><5><sync>`` back into ids.
    """
    vocab = VOCABS[TaskTag(tag)]
    ids: List[int] = []
    offset = 0
    text = "".join(text.split())
    while offset < len(text):
        if text[offset] != "<":
            raise SequenceParseError("expected '<'", offset)
        close = text.find(">", offset)
        if close < 0:
            raise SequenceParseError("unterminated token", offset)
        inner = text[offset + 1:close]
        symbol = inner if (inner in DIGIT_SYMBOLS or inner == DOT) else text[offset:close + 1]
        try:
            ids.append(vocab.id_of(symbol))
        except KeyError:
            raise SequenceParseError(f"unknown {vocab.kind.value} token {text[offset:close + 1]}", offset) from None
        offset = close + 1
    return TokenSeq.of(vocab.kind, ids)


class TextTokenizer(Protocol):
    """Anything that maps text to text-vocabulary ids and back."""

    vocab: TaskVocab

    def tokenize(self, text: str) -> List[int]:
        ...

    def detokenize(self, ids: Sequence[int]) -> str:
        ...


class ByteTextTokenizer:
    """UTF-8 byte tokenizer: id b (0..255) is the byte b."""

    vocab = TEXT_VOCAB

    def tokenize(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def detokenize_bytes(self, ids: Sequence[int]) -> bytes:
        for offset, token_id in enumerate(ids):
            if not (isinstance(token_id, int) and 0 <= token_id < 256):
                raise SequenceParseError(f"id {token_id!r} is not a byte symbol of the text vocabulary", offset)
        return bytes(ids)

    def detokenize(self, ids: Sequence[int]) -> str:
        return self.detokenize_bytes(ids).decode("utf-8", errors="replace")


DEFAULT_TEXT_TOKENIZER = ByteTextTokenizer()


def text_tokenize(s: str, tokenizer: Optional[TextTokenizer] = None) -> TokenSeq:
    """Text to text-tagged tokens; the caller appends <sync> to close a segment."""
    tokenizer = tokenizer or DEFAULT_TEXT_TOKENIZER
    return TokenSeq.of(TaskTag.TEXT, tokenizer.tokenize(s))


def text_detokenize(ids: Union[TokenSeq, Sequence[int]], tokenizer: Optional[TextTokenizer] = None) -> str:
    """Text-vocabulary ids back to text; special symbols raise SequenceParseError."""
    tokenizer = tokenizer or DEFAULT_TEXT_TOKENIZER
    if isinstance(ids, TokenSeq):
        ids = ids.ids
    return tokenizer.detokenize(list(ids))
