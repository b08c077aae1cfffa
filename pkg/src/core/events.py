"""
Event Model Module for the event-grounding toolkit.

A response to a grounding instruction is an ordered series of events; each
event is a (timestamp interval, salient score, caption) triplet. This module
holds those value types, the synthetic video sample that carries frame features,
and the ordering/validation operations every other module relies on.
"""

import math
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TIME_MAX = 9999.9
SCORE_MAX = 9.9
DEFAULT_K_MAX = 50


class TaskKind(str, Enum):
    """Annotation task families."""
    GENERAL = "general"
    DVC = "dvc"
    MR = "mr"
    VHD = "vhd"
    VS = "vs"


class PresentMask(BaseModel):
    """Which components of an event carry content (the rest are placeholders)."""
    model_config = ConfigDict(frozen=True)

    has_time: bool = Field(..., description="Event carries a timestamp interval")
    has_score: bool = Field(..., description="Event carries a salient score")
    has_text: bool = Field(..., description="Event carries a caption")

    def as_tuple(self) -> Tuple[bool, bool, bool]:
        return (self.has_time, self.has_score, self.has_text)


MASK_BY_TASK: Dict[TaskKind, PresentMask] = {
    TaskKind.GENERAL: PresentMask(has_time=False, has_score=False, has_text=True),
    TaskKind.DVC: PresentMask(has_time=True, has_score=False, has_text=True),
    TaskKind.MR: PresentMask(has_time=True, has_score=False, has_text=True),
    TaskKind.VHD: PresentMask(has_time=True, has_score=True, has_text=True),
    TaskKind.VS: PresentMask(has_time=True, has_score=True, has_text=True),
}


class Event(BaseModel):
    """
    One (interval, score, caption) triplet.

    Construction only checks types and finiteness; ordering and range
    invariants are reported by validate_response so invalid answers can be
    inspected rather than rejected.
    """
    model_config = ConfigDict(frozen=True)

    start: float = Field(0.0, description="Interval start in seconds")
    end: float = Field(0.0, description="Interval end in seconds")
    score: Optional[float] = Field(None, description="Salient score, absent for score placeholders")
    caption: str = Field("", description="Caption text")
    present_mask: PresentMask = Field(
        PresentMask(has_time=True, has_score=False, has_text=True),
        description="Components that carry content",
    )

    @field_validator('start', 'end', 'score')
    @classmethod
    def validate_finite(cls, v):
        if v is not None and not math.isfinite(v):
            raise ValueError("must be a finite number")
        return v

    @classmethod
    def for_task(cls, task_kind: TaskKind, caption: str = "", start: float = 0.0,
                 end: float = 0.0, score: Optional[float] = None) -> "Event":
        """Build an event whose present mask follows the task kind."""
        mask = MASK_BY_TASK[TaskKind(task_kind)]
        return cls(
            start=start if mask.has_time else 0.0,
            end=end if mask.has_time else 0.0,
            score=score if mask.has_score else None,
            caption=caption,
            present_mask=mask,
        )

    @property
    def interval(self) -> Tuple[float, float]:
        return (self.start, self.end)


class Response(BaseModel):
    """An ordered series of events answering one instruction."""
    model_config = ConfigDict(frozen=True)

    events: Tuple[Event, ...] = Field(default_factory=tuple, description="Events sorted by start time")

    @property
    def count(self) -> int:
        return len(self.events)

    def __len__(self) -> int:
        return len(self.events)


class VideoSample(BaseModel):
    """
    A synthetic video: frame features, frame timestamps, instruction and gold answer.

    frame_features has shape (T, N_patch, D); a (T, D) matrix is accepted and
    treated as one patch per frame.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    video_id: str = Field("sample", description="Identifier of the video")
    frame_features: np.ndarray = Field(..., description="Frame features, shape (T, N_patch, D)")
    frame_times: Tuple[float, ...] = Field(..., description="Frame timestamps in seconds, strictly increasing")
    duration: float = Field(..., gt=0, description="Video length in seconds")
    instruction: str = Field(..., description="Instruction text")
    gold: Response = Field(..., description="Ground-truth answer")
    task_kind: TaskKind = Field(TaskKind.DVC, description="Annotation task of the instruction")

    @field_validator('frame_features')
    @classmethod
    def validate_features(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3:
            raise ValueError(f"frame_features must be (T, N_patch, D) or (T, D), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("frame_features must be finite")
        v = v.copy()
        v.flags.writeable = False
        return v

    @model_validator(mode='after')
    def validate_frames(self):
        times = self.frame_times
        if len(times) != self.frame_features.shape[0]:
            raise ValueError(
                f"frame_times has {len(times)} entries but frame_features has {self.frame_features.shape[0]} frames"
            )
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame_times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.duration):
            raise ValueError(f"frame_times must lie in [0, {self.duration}]")
        for event in self.gold.events:
            if event.present_mask.has_time and (event.start < 0 or event.end > self.duration):
                raise ValueError(f"gold event [{event.start}, {event.end}] lies outside [0, {self.duration}]")
        return self

    @property
    def num_frames(self) -> int:
        return int(self.frame_features.shape[0])


class Finding(BaseModel):
    """One violated invariant found by validate_response."""
    model_config = ConfigDict(frozen=True)

    code: str = Field(..., description="Short invariant name, e.g. 'interval inverted'")
    message: str = Field(..., description="Human readable detail")
    event_index: Optional[int] = Field(None, description="Offending event, if the finding is per event")


class ValidationReport(BaseModel):
    """All invariant violations of a response; empty means valid."""
    model_config = ConfigDict(frozen=True)

    findings: Tuple[Finding, ...] = Field(default_factory=tuple)

    @property
    def is_valid(self) -> bool:
        return not self.findings

    def codes(self) -> List[str]:
        return [finding.code for finding in self.findings]

    def __len__(self) -> int:
        return len(self.findings)

    def __bool__(self) -> bool:
        return bool(self.findings)


def _event_key(event: Event) -> Tuple[float, float]:
    return (event.start, event.end)


def sort_events(events: Sequence[Event]) -> List[Event]:
    """
    Order events by (start, end); ties keep their original order.

    Args:
        events: Events in any order

    Returns:
        New list in ascending occurrence order
    """
    return sorted(events, key=_event_key)


def _is_one_decimal(value: float) -> bool:
    return math.isclose(round(value, 1), value, rel_tol=0.0, abs_tol=1e-9)


def validate_response(
    response: Response,
    duration: Optional[float] = None,
    k_max: int = DEFAULT_K_MAX,
    task_kind: Optional[TaskKind] = None,
) -> ValidationReport:
    """
    Check a response against the event-model invariants.

    Args:
        response: Response to check
        duration: Video length; time values beyond it are reported (None skips the check)
        k_max: Largest permitted event count
        task_kind: When given, every event's present mask must match the task's mask

    Returns:
        ValidationReport listing every violation (empty iff valid)
    """
    findings: List[Finding] = []
    events = response.events
    upper = TIME_MAX if duration is None else min(TIME_MAX, duration)

    if not 1 <= len(events) <= k_max:
        findings.append(Finding(
            code="event count out of range",
            message=f"K={len(events)} is outside [1, {k_max}]",
        ))

    expected_mask = MASK_BY_TASK[TaskKind(task_kind)] if task_kind is not None else None

    for index, event in enumerate(events):
        mask = event.present_mask

        if expected_mask is not None and mask != expected_mask:
            findings.append(Finding(
                code="mask inconsistent",
                message=f"mask {mask.as_tuple()} does not match task {TaskKind(task_kind).value} {expected_mask.as_tuple()}",
                event_index=index,
            ))

        if mask.has_time:
            if event.start > event.end:
                findings.append(Finding(
                    code="interval inverted",
                    message=f"start {event.start} > end {event.end}",
                    event_index=index,
                ))
            if min(event.start, event.end) < 0 or max(event.start, event.end) > upper:
                findings.append(Finding(
                    code="time out of range",
                    message=f"[{event.start}, {event.end}] is outside [0, {upper}]",
                    event_index=index,
                ))
            if not (_is_one_decimal(event.start) and _is_one_decimal(event.end)):
                findings.append(Finding(
                    code="time not one decimal",
                    message=f"[{event.start}, {event.end}] does not reproduce at one decimal",
                    event_index=index,
                ))
        elif event.start != 0.0 or event.end != 0.0:
            findings.append(Finding(
                code="mask inconsistent",
                message="time placeholder carries a non-zero interval",
                event_index=index,
            ))

        if mask.has_score:
            if event.score is None:
                findings.append(Finding(
                    code="mask inconsistent",
                    message="has_score is set but the score is missing",
                    event_index=index,
                ))
            elif not 0.0 <= event.score <= SCORE_MAX or not _is_one_decimal(event.score):
                findings.append(Finding(
                    code="score out of range",
                    message=f"score {event.score} is not a one-decimal value in [0.0, {SCORE_MAX}]",
                    event_index=index,
                ))
        elif event.score is not None:
            findings.append(Finding(
                code="mask inconsistent",
                message="score placeholder carries a score",
                event_index=index,
            ))

        if mask.has_text and not event.caption:
            findings.append(Finding(
                code="empty caption",
                message="has_text is set but the caption is empty",
                event_index=index,
            ))
        elif not mask.has_text and event.caption:
            findings.append(Finding(
                code="mask inconsistent",
                message="text placeholder carries a caption",
                event_index=index,
            ))

    for index in range(1, len(events)):
        if _event_key(events[index]) < _event_key(events[index - 1]):
            findings.append(Finding(
                code="events out of order",
                message=f"event {index} starts before event {index - 1}",
                event_index=index,
            ))

    return ValidationReport(findings=tuple(findings))


def response_to_dict(response: Response) -> Dict[str, Any]:
    """Plain-dict view used by logs and reports."""
    return {"events": [event.model_dump() for event in response.events]}
