import json

import pytest
import torch

from src.core.decoder import (
    DecodeState,
    allowed_tokens,
    generate,
    head_activations,
    step,
    write_trace,
)
from src.core.errors import ContractError
from src.core.events import PresentMask
from src.core.sequence_codec import HEAD_CYCLE, parse_sequence
from src.core.tokenizers import SCORE_VOCAB, TEXT_VOCAB, TIME_VOCAB, VOCABS, TaskTag, TokenSeq, encode_time_list

SYNC = TIME_VOCAB.sync_id
TEXT_SYNC = TEXT_VOCAB.sync_id
PROMPT = TokenSeq.of(TaskTag.TEXT, [ord("q"), TEXT_SYNC])


class ScriptedScorer:
    """Puts all mass on the next scripted token."""

    def __init__(self, script, prompt_length=len(PROMPT)):
        self.script = list(script)
        self.prompt_length = prompt_length

    def next_token_logits(self, prefix, head):
        logits = torch.zeros(len(VOCABS[head]))
        index = len(prefix) - self.prompt_length
        if index < len(self.script):
            logits[self.script[index]] = 10.0
        return logits


class RandomScorer:
    def __init__(self, seed):
        self.generator = torch.Generator().manual_seed(seed)

    def next_token_logits(self, prefix, head):
        return torch.randn(len(VOCABS[head]), generator=self.generator)


def _digits(text):
    return [TIME_VOCAB.id_of(ch) for ch in text]


def test_time_sync_switches_to_score():
    state = step(DecodeState(), SYNC)
    assert state.active_head is TaskTag.SCORE


def test_text_sync_starts_next_event():
    state = DecodeState(active_head=TaskTag.TEXT, text_length=2, event_empty=False)
    state = step(state, TEXT_SYNC)
    assert state.active_head is TaskTag.TIME
    assert state.event_index == 1
    assert not state.finished


def test_digit_keeps_head():
    state = step(DecodeState(), 7)
    assert state.active_head is TaskTag.TIME
    assert state.value_position == 1
    assert state.emitted.ids == (7,)


def test_step_rejects_foreign_token():
    with pytest.raises(ContractError):
        step(DecodeState(), 13)


def test_step_after_finish_is_rejected():
    state = DecodeState(finished=True)
    with pytest.raises(ContractError, match="finished"):
        step(state, SYNC)


def test_eos_finishes():
    state = DecodeState(active_head=TaskTag.TEXT, text_length=1, event_empty=False)
    state = step(state, TEXT_VOCAB.eos_id)
    assert state.finished
    assert state.event_index == 1


def test_event_cap_finishes():
    state = DecodeState(active_head=TaskTag.TEXT, text_length=1, event_empty=False, k_max=1)
    assert step(state, TEXT_SYNC).finished


def test_constrained_dot_after_four_digits():
    state = DecodeState(value_position=4)
    assert allowed_tokens(state, constrained=True) == {TIME_VOCAB.dot_id}


def test_constrained_separator_and_terminal():
    first_value_done = DecodeState(value_position=6)
    assert allowed_tokens(first_value_done, constrained=True) == {TIME_VOCAB.sep_id}
    second_value_done = DecodeState(value_position=6, values_in_segment=1)
    assert allowed_tokens(second_value_done, constrained=True) == {SYNC}
    score_done = DecodeState(active_head=TaskTag.SCORE, value_position=3)
    assert allowed_tokens(score_done, constrained=True) == {SCORE_VOCAB.sync_id}


def test_constrained_segment_start():
    assert allowed_tokens(DecodeState(), constrained=True) == set(range(10)) | {SYNC}
    after_sep = DecodeState(values_in_segment=1)
    assert allowed_tokens(after_sep, constrained=True) == set(range(10))


def test_unconstrained_text_head_allows_full_vocab():
    state = DecodeState(active_head=TaskTag.TEXT)
    assert allowed_tokens(state, constrained=False) == set(range(258))


def test_budget_forces_early_close():
    state = DecodeState(active_head=TaskTag.TEXT, text_length=3, event_empty=False)
    assert allowed_tokens(state, constrained=True, remaining=1) == {TEXT_VOCAB.eos_id}


def test_empty_event_after_one_event_terminates():
    script = [SYNC, SYNC, ord("h"), ord("i"), TEXT_SYNC, SYNC, SYNC, TEXT_SYNC]
    result = generate(ScriptedScorer(script), PROMPT)
    assert result.finished and not result.truncated
    assert len(result.tokens) == 8
    assert len(result.response) == 1
    event = result.response.events[0]
    assert event.caption == "hi"
    assert event.present_mask == PresentMask(has_time=False, has_score=False, has_text=True)


def test_budget_exhaustion_sets_truncated():
    script = _digits("0010.2") + [TIME_VOCAB.sep_id] + _digits("0125.4") + [SYNC]
    result = generate(ScriptedScorer(script), PROMPT, max_new_tokens=5)
    assert result.truncated
    assert not result.finished
    assert len(result.tokens) == 5
    assert len(result.response) == 0


def test_max_length_caps_budget():
    script = _digits("0010.2")
    result = generate(ScriptedScorer(script), PROMPT, max_new_tokens=100, max_length=len(PROMPT) + 3)
    assert len(result.tokens) == 3
    assert result.truncated


def test_scripted_event_is_parsed():
    script = (_digits("0010.2") + [TIME_VOCAB.sep_id] + _digits("0125.4") + [SYNC, SYNC]
              + list(b"cut") + [TEXT_SYNC, SYNC, SYNC, TEXT_VOCAB.eos_id])
    result = generate(ScriptedScorer(script), PROMPT, constrained=True)
    assert result.finished
    assert [(e.start, e.end, e.caption) for e in result.response.events] == [(10.2, 125.4, "cut")]
    assert result.tokens[:14] == encode_time_list([10.2, 125.4])


def test_unknown_policy():
    with pytest.raises(ContractError):
        generate(ScriptedScorer([]), PROMPT, policy="beam")


def test_cycle_property_on_random_streams():
    for seed in range(20):
        result = generate(RandomScorer(seed), PROMPT, max_new_tokens=60)
        heads = head_activations(result.tokens)
        assert heads == [HEAD_CYCLE[i % 3] for i in range(len(heads))]


def test_constrained_streams_parse_strictly():
    for seed in range(1000):
        result = generate(RandomScorer(seed), PROMPT, constrained=True, max_new_tokens=80, k_max=3)
        assert result.finished
        assert result.diagnostics == ()
        assert parse_sequence(result.tokens, k_max=3) == result.response


def test_greedy_is_deterministic():
    first = generate(RandomScorer(3), PROMPT, max_new_tokens=40)
    second = generate(RandomScorer(3), PROMPT, max_new_tokens=40)
    assert first.tokens == second.tokens


def test_top_k_is_seeded():
    a = generate(RandomScorer(5), PROMPT, policy="top_k", top_k=3, seed=11, max_new_tokens=40)
    b = generate(RandomScorer(5), PROMPT, policy="top_k", top_k=3, seed=11, max_new_tokens=40)
    assert a.tokens == b.tokens


def test_trace_marks_switches(tmp_path):
    script = [SYNC, SYNC, ord("h"), TEXT_SYNC, SYNC, SYNC, TEXT_SYNC]
    result = generate(ScriptedScorer(script), PROMPT)
    assert [s.switched for s in result.trace] == [True, True, False, True, True, True, True]
    path = write_trace(tmp_path / "trace.jsonl", result.trace)
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert rows[2] == {"step": 2, "head": "text", "token": "<0x68>", "switched": False}
