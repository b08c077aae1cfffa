"""
Sequence Codec Module for the event-grounding toolkit.

Builds the interleaved token sequence a model is trained on:

    [frame blocks][instruction <sync>][event 1: time, score, text][event 2: ...]

Each frame block holds the frame's visual slots followed by the 6 digit/dot
tokens of its timestamp. Each event contributes a time segment, a score segment
and a text segment, each closed by <sync>; an absent component is a lone <sync>.
The codec also emits, per position, the decoding head that predicts the next
token and whether the token at that position is scored by the loss, and it
parses answer streams (built or generated) back into events.
"""

from enum import Enum
from typing import List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import ContractError, SequenceParseError
from src.core.events import (
    DEFAULT_K_MAX,
    Event,
    PresentMask,
    Response,
    VideoSample,
    validate_response,
)
from src.core.tokenizers import (
    EOS,
    SCORE_VOCAB,
    SCORE_WIDTH,
    SYNC,
    TEXT_VOCAB,
    TIME_VOCAB,
    TIME_WIDTH,
    VOCABS,
    TaskTag,
    TextTokenizer,
    TokenSeq,
    ValueParser,
    encode_frame_time,
    encode_score_list,
    encode_time_list,
    text_detokenize,
    text_tokenize,
)
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

DEFAULT_SLOTS_PER_FRAME = 8
HEAD_CYCLE: Tuple[TaskTag, ...] = (TaskTag.TIME, TaskTag.SCORE, TaskTag.TEXT)


class Component(str, Enum):
    """Part of the answer a span covers."""
    TIME = "time"
    SCORE = "score"
    TEXT = "text"
    STOP = "stop"


class SegmentSpan(BaseModel):
    """Half-open [start, end) offsets of one component of one event."""
    model_config = ConfigDict(frozen=True)

    event_index: int
    component: Component
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


class EventSpans(BaseModel):
    """The three factor spans of one event, in decoding order."""
    model_config = ConfigDict(frozen=True)

    event_index: int
    time: SegmentSpan
    score: SegmentSpan
    text: SegmentSpan

    def as_tuple(self) -> Tuple[SegmentSpan, SegmentSpan, SegmentSpan]:
        return (self.time, self.score, self.text)


class SequenceLayout(BaseModel):
    """
    A built training sequence with its per-position annotations.

    head_assign[p] names the head that predicts token p+1 (None where the next
    token is part of the prompt or there is no next token). loss_mask[p] is
    True exactly for answer tokens.
    """
    model_config = ConfigDict(frozen=True)

    tokens: TokenSeq
    head_assign: Tuple[Optional[TaskTag], ...]
    loss_mask: Tuple[bool, ...]
    segment_spans: Tuple[SegmentSpan, ...]
    prompt_length: int = Field(..., ge=0)
    num_frames: int = Field(..., ge=0)
    slots_per_frame: int = Field(DEFAULT_SLOTS_PER_FRAME, gt=0)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> TokenSeq:
        return self.tokens[:self.prompt_length]

    @property
    def answer(self) -> TokenSeq:
        return self.tokens[self.prompt_length:]

    @property
    def frame_region_length(self) -> int:
        return self.num_frames * (self.slots_per_frame + TIME_WIDTH)

    @property
    def stop_span(self) -> Optional[SegmentSpan]:
        for span in self.segment_spans:
            if span.component is Component.STOP:
                return span
        return None


class ParseResult(BaseModel):
    """Outcome of parsing an answer stream."""
    model_config = ConfigDict(frozen=True)

    response: Response
    spans: Tuple[SegmentSpan, ...] = Field(default_factory=tuple, description="Offsets relative to the stream start")
    diagnostics: Tuple[str, ...] = Field(default_factory=tuple)
    stopped: bool = Field(False, description="An explicit end (stop event or <eos>) was read")
    consumed: int = Field(0, description="Tokens belonging to complete events and the stop marker")


def build_prompt(sample: VideoSample, slots_per_frame: int = DEFAULT_SLOTS_PER_FRAME,
                 text_tokenizer: Optional[TextTokenizer] = None) -> TokenSeq:
    """
    Frame blocks followed by the instruction and its <sync>.

    Raises:
        ContractError: no frames or an empty instruction
    """
    if sample.num_frames == 0 or not sample.instruction.strip():
        raise ContractError(
            f"degenerate prompt: {sample.num_frames} frames, instruction {sample.instruction!r}"
        )

    parts: List[TokenSeq] = []
    for frame_index, frame_time in enumerate(sample.frame_times):
        first_slot = frame_index * slots_per_frame
        parts.append(TokenSeq.of(TaskTag.VISUAL, range(first_slot, first_slot + slots_per_frame)))
        parts.append(encode_frame_time(frame_time))

    parts.append(text_tokenize(sample.instruction, text_tokenizer))
    parts.append(TokenSeq.of(TaskTag.TEXT, [TEXT_VOCAB.sync_id]))
    return TokenSeq.concat(parts)


def encode_event(event: Event, text_tokenizer: Optional[TextTokenizer] = None) -> Tuple[TokenSeq, TokenSeq, TokenSeq]:
    """The time, score and text segments of one event (placeholders as lone <sync>)."""
    mask = event.present_mask
    time_seg = encode_time_list([event.start, event.end] if mask.has_time else [])
    score_seg = encode_score_list([event.score] if mask.has_score else [])
    text_ids = list(text_tokenize(event.caption, text_tokenizer).ids) if mask.has_text else []
    text_seg = TokenSeq.of(TaskTag.TEXT, text_ids + [TEXT_VOCAB.sync_id])
    return time_seg, score_seg, text_seg


def stop_tokens() -> TokenSeq:
    """The empty event that ends a response: time <sync>, score <sync>, text <eos>."""
    return TokenSeq.concat([
        TokenSeq.of(TaskTag.TIME, [TIME_VOCAB.sync_id]),
        TokenSeq.of(TaskTag.SCORE, [SCORE_VOCAB.sync_id]),
        TokenSeq.of(TaskTag.TEXT, [TEXT_VOCAB.eos_id]),
    ])


def head_assignments(tokens: TokenSeq, prompt_length: int) -> Tuple[Optional[TaskTag], ...]:
    """Head that must predict token p+1, for every position p."""
    assign: List[Optional[TaskTag]] = []
    n = len(tokens)
    for p in range(n):
        nxt = p + 1
        assign.append(tokens.tags[nxt] if prompt_length <= nxt < n else None)
    return tuple(assign)


def build_sequence(
    sample: VideoSample,
    answer: Response,
    slots_per_frame: int = DEFAULT_SLOTS_PER_FRAME,
    k_max: int = DEFAULT_K_MAX,
    append_stop: bool = False,
    text_tokenizer: Optional[TextTokenizer] = None,
) -> SequenceLayout:
    """
    Lay out prompt and answer as one training sequence.

    Args:
        sample: Video sample providing frames, frame times and instruction
        answer: Sorted, valid response to serialize
        slots_per_frame: Visual slots per frame block
        k_max: Event cap used when validating the answer
        append_stop: Close the answer with the stop event so a model learns to end
        text_tokenizer: Tokenizer for instruction and captions (byte-level by default)

    Returns:
        SequenceLayout with head assignments, loss mask and component spans

    Raises:
        ContractError: invalid or unsorted answer, degenerate prompt
    """
    report = validate_response(answer, sample.duration, k_max)
    if report:
        raise ContractError(f"answer violates event invariants: {report.codes()}")

    prompt = build_prompt(sample, slots_per_frame, text_tokenizer)
    parts: List[TokenSeq] = [prompt]
    spans: List[SegmentSpan] = []
    offset = len(prompt)

    for event_index, event in enumerate(answer.events):
        for component, segment in zip((Component.TIME, Component.SCORE, Component.TEXT),
                                      encode_event(event, text_tokenizer)):
            spans.append(SegmentSpan(event_index=event_index, component=component,
                                     start=offset, end=offset + len(segment)))
            parts.append(segment)
            offset += len(segment)

    if append_stop:
        stop = stop_tokens()
        spans.append(SegmentSpan(event_index=len(answer.events), component=Component.STOP,
                                 start=offset, end=offset + len(stop)))
        parts.append(stop)
        offset += len(stop)

    tokens = TokenSeq.concat(parts)
    prompt_length = len(prompt)
    return SequenceLayout(
        tokens=tokens,
        head_assign=head_assignments(tokens, prompt_length),
        loss_mask=tuple(p >= prompt_length for p in range(len(tokens))),
        segment_spans=tuple(spans),
        prompt_length=prompt_length,
        num_frames=sample.num_frames,
        slots_per_frame=slots_per_frame,
    )


def _is_terminal(token_id: int, head: TaskTag) -> bool:
    vocab = VOCABS[head]
    return token_id == vocab.sync_id or (head is TaskTag.TEXT and token_id == vocab.eos_id)


class _AnswerParser:
    """Walks an answer stream segment by segment in the time, score, text cycle."""

    def __init__(self, tokens: TokenSeq, lenient: bool, k_max: int, text_tokenizer: Optional[TextTokenizer]):
        self.tokens = tokens
        self.lenient = lenient
        self.k_max = k_max
        self.text_tokenizer = text_tokenizer

    def _segment_end(self, start: int, head: TaskTag) -> int:
        """Offset one past the segment terminal; raises on truncation or a foreign tag."""
        ids, tags = self.tokens.ids, self.tokens.tags
        pos = start
        while pos < len(ids):
            if tags[pos] is not head:
                raise SequenceParseError(
                    f"{tags[pos].value} token before the {head.value} segment terminal", pos
                )
            if _is_terminal(ids[pos], head):
                return pos + 1
            pos += 1
        raise SequenceParseError(f"stream ends inside the {head.value} segment", len(ids))

    def _times(self, start: int, end: int) -> Optional[Tuple[float, float]]:
        values = ValueParser(TIME_VOCAB, TIME_WIDTH).parse(self.tokens.ids[start:end], base_offset=start)
        if not values:
            return None
        if len(values) != 2:
            raise SequenceParseError(f"time segment holds {len(values)} values, expected 2", start)
        return values[0], values[1]

    def _score(self, start: int, end: int) -> Optional[float]:
        values = ValueParser(SCORE_VOCAB, SCORE_WIDTH).parse(self.tokens.ids[start:end], base_offset=start)
        if not values:
            return None
        if len(values) != 1:
            raise SequenceParseError(f"score segment holds {len(values)} values, expected 1", start)
        return values[0]

    def _read_event(self, pos: int):
        bounds = []
        cursor = pos
        for head in HEAD_CYCLE:
            end = self._segment_end(cursor, head)
            bounds.append((cursor, end))
            cursor = end
        (t0, t1), (s0, s1), (c0, c1) = bounds
        times = self._times(t0, t1)
        score = self._score(s0, s1)
        text_ids = self.tokens.ids[c0:c1 - 1]
        return bounds, times, score, text_ids

    def run(self) -> ParseResult:
        events: List[Event] = []
        spans: List[SegmentSpan] = []
        diagnostics: List[str] = []
        stopped = False
        capped = False
        pos = 0
        n = len(self.tokens)

        try:
            while pos < n and not stopped:
                bounds, times, score, text_ids = self._read_event(pos)
                (t0, t1), (s0, s1), (c0, c1) = bounds
                caption = text_detokenize(text_ids, self.text_tokenizer) if text_ids else ""
                ended_by_eos = self.tokens.ids[c1 - 1] == TEXT_VOCAB.eos_id
                empty = times is None and score is None and not text_ids

                if empty and (events or ended_by_eos):
                    spans.append(SegmentSpan(event_index=len(events), component=Component.STOP, start=t0, end=c1))
                    stopped = True
                else:
                    index = len(events)
                    events.append(Event(
                        start=times[0] if times else 0.0,
                        end=times[1] if times else 0.0,
                        score=score,
                        caption=caption,
                        present_mask=PresentMask(
                            has_time=times is not None,
                            has_score=score is not None,
                            has_text=bool(text_ids),
                        ),
                    ))
                    spans.extend([
                        SegmentSpan(event_index=index, component=Component.TIME, start=t0, end=t1),
                        SegmentSpan(event_index=index, component=Component.SCORE, start=s0, end=s1),
                        SegmentSpan(event_index=index, component=Component.TEXT, start=c0, end=c1),
                    ])
                    capped = not ended_by_eos and len(events) >= self.k_max
                    stopped = ended_by_eos or capped
                pos = c1

            # a capped response may still carry its empty stop event
            if capped and pos < n:
                bounds, times, score, text_ids = self._read_event(pos)
                if times is None and score is None and not text_ids:
                    spans.append(SegmentSpan(event_index=len(events), component=Component.STOP,
                                             start=bounds[0][0], end=bounds[2][1]))
                    pos = bounds[2][1]

            if pos < n:
                raise SequenceParseError("tokens after the end of the response", pos)
        except SequenceParseError as exc:
            if not self.lenient:
                raise
            diagnostics.append(str(exc))
            logger.warning(f"Lenient parse kept {len(events)} complete events: {exc}")

        return ParseResult(
            response=Response(events=tuple(events)),
            spans=tuple(spans),
            diagnostics=tuple(diagnostics),
            stopped=stopped,
            consumed=pos,
        )


def parse_sequence_detailed(
    tokens: TokenSeq,
    lenient: bool = False,
    k_max: int = DEFAULT_K_MAX,
    text_tokenizer: Optional[TextTokenizer] = None,
) -> ParseResult:
    """
    Parse an answer stream, keeping spans and diagnostics.

    Args:
        tokens: Answer-region tokens tagged by head provenance
        lenient: Keep complete events and report the rest instead of raising
        k_max: Parsing stops after this many events
        text_tokenizer: Tokenizer used to decode captions

    Returns:
        ParseResult
    """
    return _AnswerParser(tokens, lenient, k_max, text_tokenizer).run()


def parse_sequence(
    tokens: TokenSeq,
    lenient: bool = False,
    k_max: int = DEFAULT_K_MAX,
    text_tokenizer: Optional[TextTokenizer] = None,
) -> Response:
    """
    Rebuild the response from an answer stream.

    Raises:
        SequenceParseError: grammar violation (strict mode only)
    """
    return parse_sequence_detailed(tokens, lenient, k_max, text_tokenizer).response


def factorized_logprob_spans(layout: SequenceLayout) -> List[EventSpans]:
    """
    Per-event (time, score, text) spans of a layout, in event order.

    Summing token log-probabilities over each span gives the event's factors
    P(t_k | ...), P(s_k | t_k, ...), P(c_k | s_k, t_k, ...).
    """
    by_event = {}
    for span in layout.segment_spans:
        if span.component is Component.STOP:
            continue
        by_event.setdefault(span.event_index, {})[span.component] = span
    return [
        EventSpans(
            event_index=index,
            time=parts[Component.TIME],
            score=parts[Component.SCORE],
            text=parts[Component.TEXT],
        )
        for index, parts in sorted(by_event.items())
    ]


def dump_layout(layout: SequenceLayout) -> str:
    """
    Debug dump: a header line, then one line per position:
    ``offset  tag  symbol  head_assign  loss_mask``.
    """
    lines = [
        f"# prompt_length={layout.prompt_length} num_frames={layout.num_frames} "
        f"slots_per_frame={layout.slots_per_frame}"
    ]
    for offset, symbol in enumerate(layout.tokens.symbols()):
        head = layout.head_assign[offset]
        lines.append("  ".join([
            str(offset),
            layout.tokens.tags[offset].value,
            symbol,
            head.value if head is not None else "none",
            "1" if layout.loss_mask[offset] else "0",
        ]))
    return "\n".join(lines) + "\n"


def load_layout_dump(text: str) -> SequenceLayout:
    """
    Read a debug dump back into a layout (spans are re-derived by parsing).

    Raises:
        SequenceParseError: malformed dump; offset is the 1-based line number
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or not lines[0].startswith("#"):
        raise SequenceParseError("missing header line", 1)

    header = {}
    for item in lines[0].lstrip("#").split():
        key, _, value = item.partition("=")
        header[key] = value
    try:
        prompt_length = int(header["prompt_length"])
        num_frames = int(header["num_frames"])
        slots_per_frame = int(header["slots_per_frame"])
    except (KeyError, ValueError):
        raise SequenceParseError("header must define prompt_length, num_frames and slots_per_frame", 1) from None

    ids: List[int] = []
    tags: List[TaskTag] = []
    heads: List[Optional[TaskTag]] = []
    mask: List[bool] = []
    for line_number, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 5:
            raise SequenceParseError(f"expected 5 columns, found {len(fields)}", line_number)
        offset, tag_name, symbol, head_name, mask_flag = fields
        try:
            if int(offset) != len(ids):
                raise SequenceParseError(f"offset {offset} out of sequence", line_number)
            tag = TaskTag(tag_name)
            head = None if head_name == "none" else TaskTag(head_name)
        except ValueError:
            raise SequenceParseError("bad offset, tag or head column", line_number) from None
        if mask_flag not in ("0", "1"):
            raise SequenceParseError("loss_mask must be 0 or 1", line_number)
        if tag is TaskTag.VISUAL:
            if not symbol.startswith("v") or not symbol[1:].isdigit():
                raise SequenceParseError(f"bad visual symbol {symbol!r}", line_number)
            token_id = int(symbol[1:])
        else:
            try:
                token_id = VOCABS[tag].id_of(symbol)
            except KeyError:
                raise SequenceParseError(f"unknown {tag.value} symbol {symbol!r}", line_number) from None
        ids.append(token_id)
        tags.append(tag)
        heads.append(head)
        mask.append(mask_flag == "1")

    tokens = TokenSeq(ids=tuple(ids), tags=tuple(tags))
    if not 0 < prompt_length <= len(tokens):
        raise SequenceParseError("prompt_length does not fit the dump", 1)
    expected_mask = tuple(p >= prompt_length for p in range(len(tokens)))
    if tuple(mask) != expected_mask:
        raise SequenceParseError("loss_mask column disagrees with prompt_length", 1)
    if tuple(heads) != head_assignments(tokens, prompt_length):
        raise SequenceParseError("head_assign column disagrees with the token tags", 1)

    result = parse_sequence_detailed(tokens[prompt_length:])
    spans = tuple(
        span.model_copy(update={"start": span.start + prompt_length, "end": span.end + prompt_length})
        for span in result.spans
    )
    return SequenceLayout(
        tokens=tokens,
        head_assign=tuple(heads),
        loss_mask=tuple(mask),
        segment_spans=spans,
        prompt_length=prompt_length,
        num_frames=num_frames,
        slots_per_frame=slots_per_frame,
    )


def parse_layout(layout: SequenceLayout, lenient: bool = False, k_max: int = DEFAULT_K_MAX) -> Response:
    """Parse the answer region of a layout."""
    return parse_sequence(layout.answer, lenient=lenient, k_max=k_max)
