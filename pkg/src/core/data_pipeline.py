"""
Data Pipeline Module for the event-grounding toolkit.

Annotation records for the five task formats and their JSONL form, the dense
caption filtering checklist, percentile score binning for highlight clips and
summarization-clip selection.
"""

import json
import math
import re
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from rapidfuzz.distance import Levenshtein

from src.config.config import PipelineConfig
from src.core.errors import ContractError, RecordSchemaError
from src.core.events import MASK_BY_TASK, Event, Response, TaskKind, VideoSample
from src.core.metrics import Interval, IntervalLike
from src.core.tokenizers import round_one_decimal
from src.utils.jsonl import iter_jsonl, write_jsonl
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

# percentile thresholds in thousandths of a percent, and the score of each bin
BIN_THRESHOLDS_MILLI: Tuple[int, ...] = (
    2275, 3593, 5480, 8076, 11507, 15866, 21186, 27425, 34458, 42074, 50000,
    57926, 65542, 72575, 78814, 84134, 88493, 91924, 94520, 96407, 97725,
)
BIN_SCORES: Tuple[float, ...] = (
    1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0,
    3.2, 3.4, 3.6, 3.8, 4.0, 4.2, 4.4, 4.6, 4.8, 5.0,
)
BIN_THRESHOLDS: Tuple[float, ...] = tuple(t / 1000 for t in BIN_THRESHOLDS_MILLI)

REASON_WORD_COUNT = "word-count"
REASON_SIMILAR = "similar-captions"
REASON_EVENT_COUNT = "event-count"
REASON_SPECIAL_CHAR = "special-character"

RECORD_KEYS = {"video_id", "duration", "task", "instruction", "events", "source"}
EVENT_KEYS = {"timestamps", "score", "caption", "source_event"}


class AnnotationRecord(BaseModel):
    """
    One annotated video for one task.

    Every event's present mask must equal the task's mask. event_sources, when
    set, gives for each event the index of the dense-caption event it was cut
    from (highlight and summarization records).
    """
    model_config = ConfigDict(frozen=True)

    video_id: str
    duration: float = Field(..., gt=0)
    task_kind: TaskKind
    instruction: str = ""
    events: Response = Field(default_factory=Response)
    source: Optional[str] = Field(None, description="Annotation source the record came from")
    event_sources: Optional[Tuple[int, ...]] = None

    @model_validator(mode='after')
    def validate_masks(self):
        mask = MASK_BY_TASK[self.task_kind]
        for index, event in enumerate(self.events.events):
            if event.present_mask != mask:
                raise ValueError(
                    f"event {index} mask {event.present_mask.as_tuple()} does not match task "
                    f"{self.task_kind.value} {mask.as_tuple()}"
                )
        if self.event_sources is not None and len(self.event_sources) != len(self.events):
            raise ValueError("event_sources must have one entry per event")
        return self


def record_from_sample(sample: VideoSample, source: Optional[str] = None) -> AnnotationRecord:
    return AnnotationRecord(
        video_id=sample.video_id,
        duration=sample.duration,
        task_kind=sample.task_kind,
        instruction=sample.instruction,
        events=sample.gold,
        source=source,
    )


def _event_to_dict(event: Event, source_event: Optional[int]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    mask = event.present_mask
    if mask.has_time:
        out["timestamps"] = [event.start, event.end]
    if mask.has_score:
        out["score"] = event.score
    if mask.has_text:
        out["caption"] = event.caption
    if source_event is not None:
        out["source_event"] = source_event
    return out


def record_to_dict(record: AnnotationRecord) -> Dict[str, Any]:
    sources = record.event_sources or (None,) * len(record.events)
    out: Dict[str, Any] = {
        "video_id": record.video_id,
        "duration": record.duration,
        "task": record.task_kind.value,
        "instruction": record.instruction,
        "events": [_event_to_dict(e, s) for e, s in zip(record.events.events, sources)],
    }
    if record.source is not None:
        out["source"] = record.source
    return out


def serialize_record(record: AnnotationRecord) -> str:
    """One JSONL line (no trailing newline); absent components are omitted."""
    return json.dumps(record_to_dict(record), ensure_ascii=False)


def _number(value: Any, field: str, line_number: Optional[int]) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise RecordSchemaError("must be a finite number", field, line_number)
    return float(value)


def _event_from_dict(obj: Any, index: int, task: TaskKind, line_number: Optional[int]) -> Tuple[Event, Optional[int]]:
    prefix = f"events[{index}]"
    if not isinstance(obj, dict):
        raise RecordSchemaError("must be an object", prefix, line_number)
    unknown = set(obj) - EVENT_KEYS
    if unknown:
        raise RecordSchemaError(f"unknown keys {sorted(unknown)}", prefix, line_number)

    mask = MASK_BY_TASK[task]
    for key, present in (("timestamps", mask.has_time), ("score", mask.has_score), ("caption", mask.has_text)):
        if present and key not in obj:
            raise RecordSchemaError(f"required for task {task.value}", f"{prefix}.{key}", line_number)
        if not present and key in obj:
            raise RecordSchemaError(f"not allowed for task {task.value}", f"{prefix}.{key}", line_number)

    start = end = 0.0
    if mask.has_time:
        stamps = obj["timestamps"]
        if not isinstance(stamps, list) or len(stamps) != 2:
            raise RecordSchemaError("must be [start, end]", f"{prefix}.timestamps", line_number)
        start = _number(stamps[0], f"{prefix}.timestamps", line_number)
        end = _number(stamps[1], f"{prefix}.timestamps", line_number)
    score = _number(obj["score"], f"{prefix}.score", line_number) if mask.has_score else None
    caption = ""
    if mask.has_text:
        caption = obj["caption"]
        if not isinstance(caption, str):
            raise RecordSchemaError("must be a string", f"{prefix}.caption", line_number)

    source_event = obj.get("source_event")
    if source_event is not None and (isinstance(source_event, bool) or not isinstance(source_event, int)):
        raise RecordSchemaError("must be an integer", f"{prefix}.source_event", line_number)

    event = Event(start=start, end=end, score=score, caption=caption, present_mask=mask)
    return event, source_event


def record_from_dict(obj: Dict[str, Any], line_number: Optional[int] = None) -> AnnotationRecord:
    """
    Build a record from its JSON object.

    Raises:
        RecordSchemaError: naming the offending field and line
    """
    unknown = set(obj) - RECORD_KEYS
    if unknown:
        raise RecordSchemaError(f"unknown keys {sorted(unknown)}", "<record>", line_number)
    for key in ("video_id", "duration", "task", "events"):
        if key not in obj:
            raise RecordSchemaError("missing", key, line_number)
    if not isinstance(obj["video_id"], str):
        raise RecordSchemaError("must be a string", "video_id", line_number)
    duration = _number(obj["duration"], "duration", line_number)
    if duration <= 0:
        raise RecordSchemaError("must be positive", "duration", line_number)
    try:
        task = TaskKind(obj["task"])
    except ValueError:
        raise RecordSchemaError(f"unknown task {obj['task']!r}", "task", line_number) from None
    instruction = obj.get("instruction", "")
    if not isinstance(instruction, str):
        raise RecordSchemaError("must be a string", "instruction", line_number)
    source = obj.get("source")
    if source is not None and not isinstance(source, str):
        raise RecordSchemaError("must be a string", "source", line_number)
    if not isinstance(obj["events"], list):
        raise RecordSchemaError("must be a list", "events", line_number)

    events: List[Event] = []
    sources: List[Optional[int]] = []
    for index, item in enumerate(obj["events"]):
        event, source_event = _event_from_dict(item, index, task, line_number)
        events.append(event)
        sources.append(source_event)

    if any(s is not None for s in sources) and any(s is None for s in sources):
        raise RecordSchemaError("source_event must be set on every event or none", "events", line_number)

    try:
        return AnnotationRecord(
            video_id=obj["video_id"],
            duration=duration,
            task_kind=task,
            instruction=instruction,
            events=Response(events=tuple(events)),
            source=source,
            event_sources=tuple(sources) if sources and sources[0] is not None else None,
        )
    except ValidationError as e:
        raise RecordSchemaError(e.errors()[0]["msg"], "<record>", line_number) from None


def parse_record(line: str, line_number: Optional[int] = None) -> AnnotationRecord:
    """Parse one JSONL line into a record."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise RecordSchemaError(f"invalid JSON: {e.msg}", "<line>", line_number) from None
    if not isinstance(obj, dict):
        raise RecordSchemaError("must be a JSON object", "<line>", line_number)
    return record_from_dict(obj, line_number)


def read_records(path: Union[str, Path]) -> Iterator[AnnotationRecord]:
    for line_number, obj in iter_jsonl(path):
        yield record_from_dict(obj, line_number)


def write_records(path: Union[str, Path], records: Sequence[AnnotationRecord]) -> Path:
    return write_jsonl(path, (record_to_dict(r) for r in records))


def normalize_caption(text: str) -> str:
    return " ".join(text.lower().split())


def fuzzy_similarity(a: str, b: str) -> int:
    """
    Levenshtein ratio 0..100 of two captions after lowercasing and whitespace
    normalization, rounded half up. Two empty strings are identical (100).
    """
    ratio = Levenshtein.normalized_similarity(normalize_caption(a), normalize_caption(b))
    return int(math.floor(ratio * 100 + 0.5))


class FilterDecision(BaseModel):
    """Keep/reject verdict of one video with every failed rule."""
    model_config = ConfigDict(frozen=True)

    video_id: str
    keep: bool
    reasons: Tuple[str, ...] = Field(default_factory=tuple)
    details: Tuple[str, ...] = Field(default_factory=tuple)


def filter_dvc(record: AnnotationRecord, config: Optional[PipelineConfig] = None) -> FilterDecision:
    """
    Apply the dense-caption quality checklist to one video.

    Rejects when a caption has too few words, two captions are near duplicates,
    the event count is out of bounds, or a caption holds characters outside
    the allowed class.
    """
    config = config or PipelineConfig()
    captions = [event.caption for event in record.events.events]
    reasons: List[str] = []
    details: List[str] = []

    short = [i for i, c in enumerate(captions) if len(c.split()) < config.min_caption_words]
    if short:
        reasons.append(REASON_WORD_COUNT)
        details.append(f"events {short} have fewer than {config.min_caption_words} words")

    for i in range(len(captions)):
        pair = next(
            (j for j in range(i + 1, len(captions))
             if fuzzy_similarity(captions[i], captions[j]) > config.similarity_threshold),
            None,
        )
        if pair is not None:
            reasons.append(REASON_SIMILAR)
            details.append(f"events {i} and {pair} are more than {config.similarity_threshold} similar")
            break

    if not config.min_event_count <= len(captions) <= config.max_event_count:
        reasons.append(REASON_EVENT_COUNT)
        details.append(f"{len(captions)} events outside [{config.min_event_count}, {config.max_event_count}]")

    allowed = re.compile(f"{config.caption_charset}*")
    special = [i for i, c in enumerate(captions) if not allowed.fullmatch(c)]
    if special:
        reasons.append(REASON_SPECIAL_CHAR)
        details.append(f"events {special} contain characters outside {config.caption_charset}")

    return FilterDecision(video_id=record.video_id, keep=not reasons, reasons=tuple(reasons), details=tuple(details))


def filter_mr(record: AnnotationRecord, config: Optional[PipelineConfig] = None) -> bool:
    """Moment-retrieval records are kept only from the configured annotation source."""
    config = config or PipelineConfig()
    return record.task_kind is TaskKind.MR and record.source == config.mr_annotation_source


def bin_scores(similarities: Sequence[float], config: Optional[PipelineConfig] = None) -> List[float]:
    """
    Map per-clip similarities to highlight scores by percentile.

    A clip's percentile is the share of the OTHER clips with strictly lower
    similarity; it takes the score of the largest threshold not above that
    share, or the floor score below the first threshold. A single clip gets
    the single-clip score.
    """
    config = config or PipelineConfig()
    values = np.asarray(similarities, dtype=float)
    n = values.shape[0]
    if n == 0:
        return []
    if n == 1:
        return [config.single_clip_score]

    ordered = np.sort(values)
    beaten = np.searchsorted(ordered, values, side="left")
    scores = []
    for count in beaten.tolist():
        # count / (n - 1) >= t / 100000, compared exactly in integers
        bin_index = -1
        for k, threshold in enumerate(BIN_THRESHOLDS_MILLI):
            if count * 100000 >= threshold * (n - 1):
                bin_index = k
        scores.append(BIN_SCORES[bin_index] if bin_index >= 0 else config.floor_score)
    return scores


def split_event_into_clips(event: IntervalLike, max_clips: Optional[int] = None,
                           config: Optional[PipelineConfig] = None) -> List[Interval]:
    """Equal contiguous clips covering the event; min(max_clips, floor(length / min_clip_len)), at least 1."""
    config = config or PipelineConfig()
    span = Interval.of(event)
    cap = config.max_clips if max_clips is None else max_clips
    if cap < 1:
        raise ContractError(f"max_clips must be at least 1, got {cap}")
    length = span.end - span.start
    count = int(math.floor(length / config.min_clip_len + 1e-9))
    count = max(1, min(cap, count))
    bounds = [span.start + length * i / count for i in range(count)] + [span.end]
    return [Interval(start=bounds[i], end=bounds[i + 1]) for i in range(count)]


def clips_per_event(record: AnnotationRecord, config: Optional[PipelineConfig] = None) -> List[int]:
    """Number of similarity values build_highlight_record expects for each event."""
    return [len(split_event_into_clips(e, config=config)) for e in record.events.events]


def build_highlight_record(dvc_record: AnnotationRecord, similarities: Sequence[Sequence[float]],
                           config: Optional[PipelineConfig] = None) -> AnnotationRecord:
    """
    Turn a dense-caption record into a highlight record.

    Each event is split into clips; the injected clip similarities are binned
    into scores (across the whole video or per event, per percentile_scope).
    Every clip becomes a scored event carrying its source event's caption.

    Raises:
        ContractError: wrong task or similarity counts that do not match the clips
    """
    config = config or PipelineConfig()
    if dvc_record.task_kind is not TaskKind.DVC:
        raise ContractError(f"highlight records are built from dvc records, got {dvc_record.task_kind.value}")
    events = dvc_record.events.events
    if len(similarities) != len(events):
        raise ContractError(f"{len(similarities)} similarity lists for {len(events)} events")

    clips = [split_event_into_clips(e, config=config) for e in events]
    for index, (event_clips, sims) in enumerate(zip(clips, similarities)):
        if len(event_clips) != len(sims):
            raise ContractError(f"event {index} has {len(event_clips)} clips but {len(sims)} similarities")

    if config.percentile_scope == "video":
        flat = bin_scores([s for sims in similarities for s in sims], config)
        per_event, cursor = [], 0
        for sims in similarities:
            per_event.append(flat[cursor:cursor + len(sims)])
            cursor += len(sims)
    else:
        per_event = [bin_scores(sims, config) for sims in similarities]

    rows = []
    for source, (event, event_clips, scores) in enumerate(zip(events, clips, per_event)):
        for clip, score in zip(event_clips, scores):
            # records carry one-decimal times like every tokenized answer
            start, end = round_one_decimal(clip.start), round_one_decimal(clip.end)
            rows.append((Event.for_task(TaskKind.VHD, caption=event.caption, start=start, end=end, score=score), source))
    rows.sort(key=lambda row: (row[0].start, row[0].end))

    return AnnotationRecord(
        video_id=dvc_record.video_id,
        duration=dvc_record.duration,
        task_kind=TaskKind.VHD,
        instruction=dvc_record.instruction,
        events=Response(events=tuple(row[0] for row in rows)),
        source=dvc_record.source,
        event_sources=tuple(row[1] for row in rows),
    )


def select_summary_clips(vhd_record: AnnotationRecord) -> AnnotationRecord:
    """
    One summarization clip per source event: the highest-scored clip, ties to the earliest.

    Raises:
        ContractError: not a highlight record, or clips without source provenance
    """
    if vhd_record.task_kind is not TaskKind.VHD:
        raise ContractError(f"summaries are selected from vhd records, got {vhd_record.task_kind.value}")
    if vhd_record.event_sources is None:
        raise ContractError("vhd record has no source_event provenance")

    best: Dict[int, Event] = {}
    for event, source in zip(vhd_record.events.events, vhd_record.event_sources):
        current = best.get(source)
        if current is None or event.score > current.score or (
                event.score == current.score and event.start < current.start):
            best[source] = event

    rows = sorted(
        ((Event.for_task(TaskKind.VS, caption=e.caption, start=e.start, end=e.end, score=e.score), source)
         for source, e in best.items()),
        key=lambda row: (row[0].start, row[0].end),
    )
    return AnnotationRecord(
        video_id=vhd_record.video_id,
        duration=vhd_record.duration,
        task_kind=TaskKind.VS,
        instruction=vhd_record.instruction,
        events=Response(events=tuple(row[0] for row in rows)),
        source=vhd_record.source,
        event_sources=tuple(row[1] for row in rows),
    )


def prediction_record(sample: VideoSample, response: Response) -> AnnotationRecord:
    """Record of a generated answer; events whose mask disagrees with the task are dropped."""
    mask = MASK_BY_TASK[sample.task_kind]
    kept = tuple(event for event in response.events if event.present_mask == mask)
    if len(kept) != len(response.events):
        logger.warning(f"{sample.video_id}: dropped {len(response.events) - len(kept)} events with a foreign mask")
    return AnnotationRecord(
        video_id=sample.video_id,
        duration=sample.duration,
        task_kind=sample.task_kind,
        instruction=sample.instruction,
        events=Response(events=kept),
    )
