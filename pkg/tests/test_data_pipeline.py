import json
import math

import numpy as np
import pytest

from src.config.config import PipelineConfig
from src.core.data_pipeline import (
    BIN_SCORES,
    BIN_THRESHOLDS_MILLI,
    REASON_EVENT_COUNT,
    REASON_SIMILAR,
    REASON_SPECIAL_CHAR,
    REASON_WORD_COUNT,
    AnnotationRecord,
    bin_scores,
    build_highlight_record,
    clips_per_event,
    filter_dvc,
    filter_mr,
    fuzzy_similarity,
    parse_record,
    prediction_record,
    read_records,
    record_from_dict,
    record_from_sample,
    select_summary_clips,
    serialize_record,
    split_event_into_clips,
    write_records,
)
from src.core.errors import ContractError, RecordSchemaError
from src.core.events import Event, Response, TaskKind
from src.core.metrics import Interval
from tests.conftest import make_sample, random_response

CAPTIONS = [
    "a man walks into the kitchen.",
    "he chops fresh green onions slowly.",
    "water boils in a large steel pot.",
    "noodles are dropped into boiling water.",
    "the finished dish is served on plates.",
]


def _record(task, rows, video_id="v1", source=None, duration=100.0, event_sources=None):
    events = tuple(Event.for_task(task, caption=c, start=s, end=e, score=sc) for s, e, sc, c in rows)
    return AnnotationRecord(video_id=video_id, duration=duration, task_kind=task, instruction="describe",
                            events=Response(events=events), source=source, event_sources=event_sources)


def _dvc(captions, video_id="v1"):
    return _record(TaskKind.DVC, [(10.0 * i, 10.0 * i + 5.0, None, c) for i, c in enumerate(captions)], video_id)


def _levenshtein(a, b):
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        prev, row[0] = row[0], i
        for j, cb in enumerate(b, start=1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (ca != cb))
    return row[-1]


def _similarity_oracle(a, b):
    a, b = " ".join(a.lower().split()), " ".join(b.lower().split())
    longest = max(len(a), len(b))
    if longest == 0:
        return 100
    return int(math.floor((1 - _levenshtein(a, b) / longest) * 100 + 0.5))


class TestRecords:
    def test_serialized_record_omits_absent_components(self):
        record = _record(TaskKind.MR, [(1.0, 2.5, None, "a query")], source="internvid-10m-flt-info")
        obj = json.loads(serialize_record(record))
        assert obj == {
            "video_id": "v1",
            "duration": 100.0,
            "task": "mr",
            "instruction": "describe",
            "events": [{"timestamps": [1.0, 2.5], "caption": "a query"}],
            "source": "internvid-10m-flt-info",
        }

    @pytest.mark.parametrize("task", list(TaskKind))
    def test_line_round_trip(self, rng, task):
        response = random_response(rng, task_kind=task)
        record = AnnotationRecord(video_id="x", duration=500.0, task_kind=task, events=response)
        assert parse_record(serialize_record(record)) == record

    def test_file_round_trip_keeps_provenance(self, tmp_path):
        record = _record(TaskKind.VHD, [(0.0, 1.0, 2.0, "a"), (1.0, 2.0, 4.2, "a")], event_sources=(0, 0))
        path = write_records(tmp_path / "out" / "vhd.jsonl", [record])
        assert list(read_records(path)) == [record]

    def test_record_from_sample(self):
        sample = make_sample(video_id="train-00003")
        record = record_from_sample(sample, source="synthetic")
        assert record.video_id == "train-00003"
        assert record.events == sample.gold
        assert record.source == "synthetic"

    def test_mask_mismatch_is_rejected(self):
        with pytest.raises(ValueError):
            AnnotationRecord(video_id="v", duration=1.0, task_kind=TaskKind.DVC,
                             events=Response(events=(Event.for_task(TaskKind.VHD, "a", 0.0, 1.0, 2.0),)))

    @pytest.mark.parametrize("obj,field", [
        ({"video_id": "v", "task": "mr", "events": []}, "duration"),
        ({"video_id": "v", "duration": 5, "task": "nope", "events": []}, "task"),
        ({"video_id": "v", "duration": -1, "task": "mr", "events": []}, "duration"),
        ({"video_id": "v", "duration": 5, "task": "mr", "events": [{"timestamps": [1, 2], "caption": "q", "score": 3}]},
         "events[0].score"),
        ({"video_id": "v", "duration": 5, "task": "dvc", "events": [{"caption": "q"}]}, "events[0].timestamps"),
        ({"video_id": "v", "duration": 5, "task": "dvc", "events": [{"timestamps": [1, "x"], "caption": "q"}]},
         "events[0].timestamps"),
        ({"video_id": "v", "duration": 5, "task": "general", "events": [], "extra": 1}, "<record>"),
    ])
    def test_schema_errors_name_the_field(self, obj, field):
        with pytest.raises(RecordSchemaError) as info:
            record_from_dict(obj, line_number=7)
        assert info.value.field == field
        assert info.value.line_number == 7
        assert "line 7" in str(info.value)

    def test_bad_line_in_file_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = serialize_record(_dvc(CAPTIONS))
        path.write_text(good + "\n" + "{not json\n", encoding="utf-8")
        with pytest.raises(RecordSchemaError) as info:
            list(read_records(path))
        assert info.value.line_number == 2
        assert info.value.field == "<line>"

    def test_prediction_record_drops_foreign_masks(self):
        sample = make_sample(task_kind=TaskKind.MR)
        response = Response(events=(
            Event.for_task(TaskKind.MR, "q", 1.0, 2.0),
            Event.for_task(TaskKind.VHD, "q", 3.0, 4.0, 2.0),
        ))
        record = prediction_record(sample, response)
        assert len(record.events) == 1
        assert record.events.events[0].start == 1.0


class TestFiltering:
    def test_compliant_record_is_kept(self):
        decision = filter_dvc(_dvc(CAPTIONS))
        assert decision.keep
        assert decision.reasons == ()

    @pytest.mark.parametrize("captions,reason", [
        (["a man"] + CAPTIONS[1:], REASON_WORD_COUNT),
        (CAPTIONS[:1] + ["a man walks into the kitchen now."] + CAPTIONS[2:], REASON_SIMILAR),
        (CAPTIONS[:4], REASON_EVENT_COUNT),
        (CAPTIONS[:1] + ["he chops fresh, green onions slowly."] + CAPTIONS[2:], REASON_SPECIAL_CHAR),
    ])
    def test_each_violation_has_a_single_reason(self, captions, reason):
        decision = filter_dvc(_dvc(captions))
        assert not decision.keep
        assert decision.reasons == (reason,)
        assert len(decision.details) == 1

    def test_event_count_upper_bound(self):
        config = PipelineConfig(max_event_count=5)
        captions = CAPTIONS + ["a dog sleeps under the table."]
        assert filter_dvc(_dvc(captions), config).reasons == (REASON_EVENT_COUNT,)

    def test_filter_mr_accepts_only_configured_source(self):
        row = [(1.0, 2.0, None, "a query")]
        assert filter_mr(_record(TaskKind.MR, row, source="internvid-10m-flt-info"))
        assert not filter_mr(_record(TaskKind.MR, row, source="other"))
        assert not filter_mr(_record(TaskKind.MR, row))
        assert filter_mr(_record(TaskKind.MR, row, source="mine"), PipelineConfig(mr_annotation_source="mine"))

    def test_fuzzy_similarity_examples(self):
        assert fuzzy_similarity("", "") == 100
        assert fuzzy_similarity("A  Man", "a man") == 100
        assert fuzzy_similarity("abcd", "abce") == 75
        assert fuzzy_similarity("abc", "xyz") == 0

    def test_fuzzy_similarity_matches_edit_distance(self, rng):
        alphabet = list("abC ")
        for _ in range(300):
            a = "".join(rng.choice(alphabet, size=int(rng.integers(0, 12))))
            b = "".join(rng.choice(alphabet, size=int(rng.integers(0, 12))))
            assert fuzzy_similarity(a, b) == _similarity_oracle(a, b)


class TestScoreBinning:
    def test_small_examples(self):
        assert bin_scores([]) == []
        assert bin_scores([0.7]) == [3.0]
        assert bin_scores([0.1, 0.2, 0.3]) == [1.0, 3.0, 5.0]
        assert bin_scores([0.5, 0.5, 0.5]) == [1.0, 1.0, 1.0]

    def test_top_bin_boundary(self):
        scores = bin_scores(np.arange(1001, dtype=float))
        assert scores[978] == 5.0
        assert scores[977] == 4.8
        assert scores[500] == 3.0

    def test_ladder_hits_every_bin(self):
        # with 100001 distinct clips a clip's share of beaten clips is index / 100000
        scores = bin_scores(np.arange(100001, dtype=float))
        assert [scores[t] for t in BIN_THRESHOLDS_MILLI] == list(BIN_SCORES)
        assert scores[BIN_THRESHOLDS_MILLI[0] - 1] == 1.0
        for k in range(1, len(BIN_THRESHOLDS_MILLI)):
            assert scores[BIN_THRESHOLDS_MILLI[k] - 1] == BIN_SCORES[k - 1]

    def test_monotone_and_in_score_set(self, rng):
        for _ in range(50):
            values = np.round(rng.normal(size=int(rng.integers(2, 60))), 1)
            scores = bin_scores(values)
            order = np.argsort(values, kind="stable")
            assert all(scores[a] <= scores[b] for a, b in zip(order, order[1:]))
            assert set(scores) <= set(BIN_SCORES)

    def test_scores_ignore_input_order(self, rng):
        values = rng.normal(size=30)
        perm = rng.permutation(30)
        assert [bin_scores(values)[i] for i in perm] == bin_scores(values[perm])


class TestClips:
    def test_long_event_is_capped(self):
        clips = split_event_into_clips(Interval(start=0.0, end=40.0))
        assert len(clips) == 20
        assert all(c.length == pytest.approx(2.0) for c in clips)

    def test_short_event_is_one_clip(self):
        assert split_event_into_clips((3.0, 3.5)) == [Interval(start=3.0, end=3.5)]

    def test_max_clips_keyword(self):
        assert len(split_event_into_clips((0.0, 40.0), max_clips=5)) == 5
        assert len(split_event_into_clips((0.0, 3.0), max_clips=5)) == 3
        with pytest.raises(ContractError):
            split_event_into_clips((0.0, 3.0), max_clips=0)

    def test_events_split_like_intervals(self):
        event = Event.for_task(TaskKind.DVC, caption="stir", start=2.0, end=5.0)
        assert split_event_into_clips(event) == split_event_into_clips((2.0, 5.0))

    def test_clips_cover_event(self, rng):
        for _ in range(100):
            start = float(rng.uniform(0, 50))
            end = start + float(rng.uniform(0, 30))
            clips = split_event_into_clips((start, end))
            assert clips[0].start == start
            assert clips[-1].end == end
            assert all(a.end == b.start for a, b in zip(clips, clips[1:]))
            assert len(clips) == max(1, min(20, int(math.floor((end - start) + 1e-9))))

    def test_highlight_clip_bounds_are_one_decimal(self):
        dvc = _record(TaskKind.DVC, [(0.0, 2.5, None, "cut it")])
        vhd = build_highlight_record(dvc, [[0.1, 0.2]])
        assert [(e.start, e.end) for e in vhd.events.events] == [(0.0, 1.3), (1.3, 2.5)]

    def test_highlight_record_video_scope(self):
        dvc = _record(TaskKind.DVC, [(0.0, 2.0, None, "cut it"), (2.0, 5.0, None, "wash it")])
        assert clips_per_event(dvc) == [2, 3]
        vhd = build_highlight_record(dvc, [[0.1, 0.2], [0.3, 0.4, 0.5]])
        assert vhd.task_kind is TaskKind.VHD
        assert [e.score for e in vhd.events.events] == [1.0, 2.2, 3.0, 3.6, 5.0]
        assert [(e.start, e.end) for e in vhd.events.events] == [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]
        assert vhd.event_sources == (0, 0, 1, 1, 1)
        assert [e.caption for e in vhd.events.events] == ["cut it"] * 2 + ["wash it"] * 3

    def test_highlight_record_event_scope(self):
        dvc = _record(TaskKind.DVC, [(0.0, 2.0, None, "cut it"), (2.0, 5.0, None, "wash it")])
        vhd = build_highlight_record(dvc, [[0.1, 0.2], [0.3, 0.4, 0.5]], PipelineConfig(percentile_scope="event"))
        assert [e.score for e in vhd.events.events] == [1.0, 5.0, 1.0, 3.0, 5.0]

    def test_highlight_record_contract(self):
        dvc = _record(TaskKind.DVC, [(0.0, 2.0, None, "cut it")])
        with pytest.raises(ContractError):
            build_highlight_record(dvc, [[0.1]])
        with pytest.raises(ContractError):
            build_highlight_record(dvc, [])
        mr = _record(TaskKind.MR, [(0.0, 2.0, None, "cut it")])
        with pytest.raises(ContractError):
            build_highlight_record(mr, [[0.1, 0.2]])

    def test_summary_picks_best_clip_per_event(self):
        dvc = _record(TaskKind.DVC, [(0.0, 2.0, None, "cut it"), (2.0, 5.0, None, "wash it")])
        vs = select_summary_clips(build_highlight_record(dvc, [[0.1, 0.2], [0.3, 0.4, 0.5]]))
        assert vs.task_kind is TaskKind.VS
        assert [(e.start, e.end, e.score) for e in vs.events.events] == [(1.0, 2.0, 2.2), (4.0, 5.0, 5.0)]
        assert vs.event_sources == (0, 1)

    def test_summary_ties_go_to_earliest(self):
        vhd = _record(TaskKind.VHD, [(0.0, 1.0, 3.0, "a"), (1.0, 2.0, 3.0, "a")], event_sources=(0, 0))
        vs = select_summary_clips(vhd)
        assert [(e.start, e.end) for e in vs.events.events] == [(0.0, 1.0)]

    def test_summary_needs_provenance(self):
        with pytest.raises(ContractError):
            select_summary_clips(_record(TaskKind.VHD, [(0.0, 1.0, 3.0, "a")]))
        with pytest.raises(ContractError):
            select_summary_clips(_dvc(CAPTIONS))

    def test_summary_matches_argmax_oracle(self, rng):
        for _ in range(200):
            count = int(rng.integers(1, 5))
            cuts = np.sort(rng.choice(np.arange(1, 60), size=2 * count, replace=False)).astype(float)
            rows = [(cuts[2 * i], cuts[2 * i + 1], None, f"step {i}") for i in range(count)]
            dvc = _record(TaskKind.DVC, rows)
            sims = [rng.normal(size=n).tolist() for n in clips_per_event(dvc)]
            vhd = build_highlight_record(dvc, sims)
            vs = select_summary_clips(vhd)

            expected = []
            for source in range(count):
                clips = [e for e, s in zip(vhd.events.events, vhd.event_sources) if s == source]
                top = max(clips, key=lambda e: (e.score, -e.start))
                expected.append((top.start, top.end, top.score))
            assert [(e.start, e.end, e.score) for e in vs.events.events] == sorted(expected)
            assert {(e.start, e.end) for e in vs.events.events} <= {(e.start, e.end) for e in vhd.events.events}
