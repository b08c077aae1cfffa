"""
Head-Switching Decoder Module for the event-grounding toolkit.

Generation cycles the decoding heads time -> score -> text, switching whenever
the active head emits <sync>. A small state machine tracks the position inside
the fixed-width value grammar so sampling can optionally be constrained to
well-formed timestamps and scores.

Termination: after at least one complete event, an event whose three segments
are all empty ends generation. A text <eos> also ends it, as do the event cap
and the token budget (the latter flags the result as truncated).
"""

import math
from pathlib import Path
from typing import FrozenSet, List, Literal, Optional, Protocol, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import ContractError
from src.core.events import DEFAULT_K_MAX, Response
from src.core.sequence_codec import HEAD_CYCLE, parse_sequence_detailed
from src.core.tokenizers import (
    SCORE_WIDTH,
    TIME_WIDTH,
    VOCABS,
    TaskTag,
    TokenSeq,
)
from src.utils.jsonl import write_jsonl
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

VALUE_WIDTH = {TaskTag.TIME: TIME_WIDTH, TaskTag.SCORE: SCORE_WIDTH}
VALUES_PER_SEGMENT = {TaskTag.TIME: 2, TaskTag.SCORE: 1}


class DecodeState(BaseModel):
    """Position of one generation session inside the head cycle."""
    model_config = ConfigDict(frozen=True)

    active_head: TaskTag = TaskTag.TIME
    event_index: int = Field(0, description="Completed events so far")
    value_position: int = Field(0, description="Tokens emitted in the current value")
    values_in_segment: int = Field(0, description="Values closed by <sep> in the current segment")
    text_length: int = Field(0, description="Tokens in the current text segment")
    event_empty: bool = Field(True, description="Every segment of the current event so far is empty")
    finished: bool = False
    k_max: int = Field(DEFAULT_K_MAX, gt=0)
    emitted: TokenSeq = Field(default_factory=TokenSeq)

    @property
    def segment_empty(self) -> bool:
        if self.active_head is TaskTag.TEXT:
            return self.text_length == 0
        return self.value_position == 0 and self.values_in_segment == 0


def _next_head(head: TaskTag) -> TaskTag:
    return HEAD_CYCLE[(HEAD_CYCLE.index(head) + 1) % len(HEAD_CYCLE)]


def step(state: DecodeState, sampled_token: int) -> DecodeState:
    """
    Consume one sampled token.

    Raises:
        ContractError: token outside the active head's vocabulary, or the session has finished
    """
    if state.finished:
        raise ContractError("step after the session finished")
    head = state.active_head
    vocab = VOCABS[head]
    if sampled_token not in vocab:
        raise ContractError(f"token {sampled_token} is not in the {head.value} vocabulary")

    update = {"emitted": state.emitted.append(sampled_token, head)}

    if head is TaskTag.TEXT:
        if sampled_token not in (vocab.sync_id, vocab.eos_id):
            update["text_length"] = state.text_length + 1
            return state.model_copy(update=update)

        all_empty = state.event_empty and state.text_length == 0
        is_eos = sampled_token == vocab.eos_id
        update.update(active_head=TaskTag.TIME, text_length=0, event_empty=True)
        if all_empty and (state.event_index >= 1 or is_eos):
            update["finished"] = True
        else:
            events = state.event_index + 1
            update["event_index"] = events
            update["finished"] = is_eos or events >= state.k_max
        return state.model_copy(update=update)

    if sampled_token == vocab.sync_id:
        update.update(
            active_head=_next_head(head),
            value_position=0,
            values_in_segment=0,
            event_empty=state.event_empty and state.segment_empty,
        )
    elif sampled_token == vocab.sep_id:
        update.update(value_position=0, values_in_segment=state.values_in_segment + 1)
    else:
        update["value_position"] = state.value_position + 1
    return state.model_copy(update=update)


def _value_tokens_left(head: TaskTag, value_position: int, values_in_segment: int) -> int:
    """Fewest tokens that close the current value segment, <sync> included."""
    width = VALUE_WIDTH[head]
    if value_position == 0 and values_in_segment == 0:
        return 1
    closed = values_in_segment + (1 if value_position > 0 else 0)
    tokens = (width - value_position) if value_position > 0 else width
    # each further value costs a <sep> plus its digits
    tokens += max(0, VALUES_PER_SEGMENT[head] - max(closed, values_in_segment + 1)) * (width + 1)
    return tokens + 1


def _tokens_to_finish(head: TaskTag, value_position: int, values_in_segment: int) -> int:
    """Fewest tokens that end the session from a head position (text <eos> ends it in one)."""
    if head is TaskTag.TEXT:
        return 1
    left = _value_tokens_left(head, value_position, values_in_segment)
    if head is TaskTag.TIME:
        return left + 1 + 1
    return left + 1


def _grammar_tokens(state: DecodeState) -> FrozenSet[int]:
    head = state.active_head
    vocab = VOCABS[head]
    width = VALUE_WIDTH[head]
    digits = frozenset(vocab.digit_ids)
    position = state.value_position

    if position == 0:
        if state.values_in_segment == 0:
            return digits | {vocab.sync_id}
        return digits
    if position < width:
        return frozenset({vocab.dot_id}) if position == width - 2 else digits
    # a full value admits <sep> only while the segment still owes a value, else <sync>;
    # strict parsing needs exactly two times and one score
    if state.values_in_segment + 1 < VALUES_PER_SEGMENT[head]:
        return frozenset({vocab.sep_id})
    return frozenset({vocab.sync_id})


def _within_budget(state: DecodeState, token: int, remaining: int) -> bool:
    head = state.active_head
    vocab = VOCABS[head]
    if head is TaskTag.TEXT:
        if token == vocab.eos_id:
            return remaining >= 1
        if token == vocab.sync_id:
            return remaining >= 1 + _tokens_to_finish(TaskTag.TIME, 0, 0)
        return remaining >= 2
    if token == vocab.sync_id:
        return remaining >= 1 + _tokens_to_finish(_next_head(head), 0, 0)
    if token == vocab.sep_id:
        return remaining >= 1 + _tokens_to_finish(head, 0, state.values_in_segment + 1)
    return remaining >= 1 + _tokens_to_finish(head, state.value_position + 1, state.values_in_segment)


def allowed_tokens(state: DecodeState, constrained: bool, remaining: Optional[int] = None) -> FrozenSet[int]:
    """
    Token ids the active head may emit next.

    Args:
        state: Current session state
        constrained: Enforce the fixed-width value grammar
        remaining: Token budget left; when constrained, tokens that cannot
            reach a complete response within it are dropped (unless that
            would leave nothing)

    Returns:
        Set of ids in the active head's vocabulary (empty once finished)
    """
    if state.finished:
        return frozenset()
    head = state.active_head
    vocab = VOCABS[head]
    if not constrained:
        return frozenset(range(len(vocab)))

    allowed = frozenset(range(len(vocab))) if head is TaskTag.TEXT else _grammar_tokens(state)
    if remaining is None:
        return allowed
    fitting = frozenset(token for token in allowed if _within_budget(state, token, remaining))
    return fitting or allowed


class NextTokenScorer(Protocol):
    """Anything that scores the next token of a prefix with one named head."""

    def next_token_logits(self, prefix: TokenSeq, head: TaskTag) -> torch.Tensor:
        """Unnormalized scores over the head's vocabulary, shape (vocab_size,)."""
        ...


class TraceStep(BaseModel):
    """One generation step, as written to the trace log."""
    model_config = ConfigDict(frozen=True)

    step: int
    head: TaskTag
    token: str
    switched: bool


class GenerationResult(BaseModel):
    """Parsed response plus the raw emitted stream."""
    model_config = ConfigDict(frozen=True)

    response: Response
    tokens: TokenSeq
    truncated: bool = False
    finished: bool = False
    diagnostics: Tuple[str, ...] = Field(default_factory=tuple)
    trace: Tuple[TraceStep, ...] = Field(default_factory=tuple)


def _pick(logits: torch.Tensor, policy: str, top_k: int, generator: torch.Generator) -> int:
    if policy == "greedy":
        return int(torch.argmax(logits).item())
    finite = int(torch.isfinite(logits).sum().item())
    k = max(1, min(top_k, finite))
    values, indices = torch.topk(logits, k)
    probs = torch.softmax(values, dim=-1)
    choice = torch.multinomial(probs, 1, generator=generator)
    return int(indices[choice].item())


def generate(
    scorer: NextTokenScorer,
    prompt: TokenSeq,
    policy: Literal["greedy", "top_k"] = "greedy",
    constrained: bool = False,
    max_new_tokens: int = 512,
    max_length: Optional[int] = None,
    k_max: int = DEFAULT_K_MAX,
    top_k: int = 5,
    seed: int = 0,
) -> GenerationResult:
    """
    Decode a response for a prompt by cycling the heads.

    Args:
        scorer: Model exposing per-head next-token scores
        prompt: Frame blocks and instruction, ending with the instruction <sync>
        policy: "greedy" or "top_k" sampling
        constrained: Restrict digits/dots/separators to the fixed-width grammar
        max_new_tokens: Budget of generated tokens
        max_length: Cap on prompt plus generated length
        k_max: Event cap
        top_k: Candidates for the top_k policy
        seed: Seed of the sampling generator

    Returns:
        GenerationResult; truncated is set when a budget ran out before termination
    """
    if policy not in ("greedy", "top_k"):
        raise ContractError(f"unknown decoding policy {policy!r}")

    generator = torch.Generator().manual_seed(seed)
    budget = max_new_tokens
    if max_length is not None:
        budget = min(budget, max_length - len(prompt))

    state = DecodeState(k_max=k_max)
    trace: List[TraceStep] = []

    while not state.finished and len(state.emitted) < budget:
        head = state.active_head
        remaining = budget - len(state.emitted)
        logits = scorer.next_token_logits(prompt + state.emitted, head).detach().to(torch.float64).flatten()
        vocab_size = len(VOCABS[head])
        if logits.shape[0] < vocab_size:
            raise ContractError(f"{head.value} scores cover {logits.shape[0]} of {vocab_size} ids")
        logits = logits[:vocab_size]

        allowed = allowed_tokens(state, constrained, remaining)
        mask = torch.full_like(logits, -math.inf)
        mask[sorted(allowed)] = 0.0
        token = _pick(logits + mask, policy, top_k, generator)

        state = step(state, token)
        trace.append(TraceStep(
            step=len(trace),
            head=head,
            token=VOCABS[head].symbol_of(token),
            switched=state.active_head is not head,
        ))

    truncated = not state.finished
    if truncated:
        logger.warning(f"Generation stopped by the token budget after {len(state.emitted)} tokens")

    parsed = parse_sequence_detailed(state.emitted, lenient=True, k_max=k_max)
    for message in parsed.diagnostics:
        logger.debug(f"Generated stream: {message}")

    return GenerationResult(
        response=parsed.response,
        tokens=state.emitted,
        truncated=truncated,
        finished=state.finished,
        diagnostics=parsed.diagnostics,
        trace=tuple(trace),
    )


def head_activations(tokens: TokenSeq) -> List[TaskTag]:
    """Heads in the order they became active while emitting a stream."""
    heads: List[TaskTag] = []
    for tag in tokens.tags:
        if not heads or heads[-1] is not tag:
            heads.append(tag)
    return heads


def write_trace(path: Union[str, Path], trace: Tuple[TraceStep, ...]) -> Path:
    """Write the generation trace as JSONL ({step, head, token, switched} per line)."""
    return write_jsonl(path, (item.model_dump(mode="json") for item in trace))
