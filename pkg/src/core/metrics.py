"""
Metrics Module for the event-grounding toolkit.

Interval metrics for temporal grounding: IOU, recall at IOU thresholds, mean
IOU, timestamp F1 over IOU thresholds (greedy and optimal matching), interval
mAP and HIT@1. Every percentage is on a 0..100 scale.
"""

import json
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import linear_sum_assignment

from src.core.errors import ContractError
from src.core.events import Event, Response, TaskKind
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

F1_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
MAP_THRESHOLDS = (0.5, 0.75)
RECALL_THRESHOLDS = (0.3, 0.5, 0.7)
HIT_GOLD_THRESHOLD = 4.0


class Interval(BaseModel):
    """A [start, end] span in seconds."""
    model_config = ConfigDict(frozen=True)

    start: float
    end: float

    @model_validator(mode='after')
    def validate_order(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("interval endpoints must be finite")
        if self.start > self.end:
            raise ValueError(f"interval start {self.start} > end {self.end}")
        return self

    @classmethod
    def of(cls, value: "IntervalLike") -> "Interval":
        if isinstance(value, Interval):
            return value
        if isinstance(value, Event):
            return cls(start=value.start, end=value.end)
        start, end = value
        return cls(start=float(start), end=float(end))

    @property
    def length(self) -> float:
        return self.end - self.start


IntervalLike = Union[Interval, Event, Tuple[float, float], Sequence[float]]


class ScoredClip(BaseModel):
    """A clip with the model's score and, when known, its annotated score."""
    model_config = ConfigDict(frozen=True)

    interval: Interval
    predicted_score: float
    gold_score: Optional[float] = None

    @field_validator('predicted_score', 'gold_score')
    @classmethod
    def validate_finite(cls, v):
        if v is not None and not math.isfinite(v):
            raise ValueError("scores must be finite")
        return v


def iou(a: IntervalLike, b: IntervalLike) -> float:
    """
    Intersection over union of two intervals.

    Zero-length unions give 1.0 for identical points and 0.0 otherwise.
    """
    a, b = Interval.of(a), Interval.of(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        return 1.0 if (a.start, a.end) == (b.start, b.end) else 0.0
    return inter / union


def _aligned(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions for {len(golds)} queries")


def recall_at_1(preds: Sequence[Optional[IntervalLike]], golds: Sequence[IntervalLike], threshold: float) -> float:
    """Percentage of queries whose top-1 prediction reaches IOU >= threshold (None counts as a miss)."""
    _aligned(preds, golds)
    if not golds:
        return 0.0
    hits = sum(1 for p, g in zip(preds, golds) if p is not None and iou(p, g) >= threshold)
    return 100.0 * hits / len(golds)


def mean_iou(preds: Sequence[Optional[IntervalLike]], golds: Sequence[IntervalLike]) -> float:
    """Mean per-query IOU as a percentage (None counts as 0)."""
    _aligned(preds, golds)
    if not golds:
        return 0.0
    total = sum(iou(p, g) if p is not None else 0.0 for p, g in zip(preds, golds))
    return 100.0 * total / len(golds)


def _iou_matrix(preds: Sequence[Interval], golds: Sequence[Interval]) -> np.ndarray:
    matrix = np.zeros((len(preds), len(golds)))
    for i, p in enumerate(preds):
        for j, g in enumerate(golds):
            matrix[i, j] = iou(p, g)
    return matrix


def _greedy_matches(matrix: np.ndarray, threshold: float) -> int:
    """One-to-one matching in descending IOU order (ties by prediction, then gold index)."""
    pairs = [
        (-matrix[i, j], i, j)
        for i in range(matrix.shape[0])
        for j in range(matrix.shape[1])
        if matrix[i, j] >= threshold
    ]
    pairs.sort()
    used_pred, used_gold = set(), set()
    for _, i, j in pairs:
        if i in used_pred or j in used_gold:
            continue
        used_pred.add(i)
        used_gold.add(j)
    return len(used_pred)


def _optimal_matches(matrix: np.ndarray, threshold: float) -> int:
    """Maximum one-to-one matching among pairs with IOU >= threshold."""
    eligible = (matrix >= threshold).astype(float)
    rows, cols = linear_sum_assignment(eligible, maximize=True)
    return int(eligible[rows, cols].sum())


def _f1(matches: int, num_pred: int, num_gold: int) -> float:
    if matches == 0:
        return 0.0
    precision = matches / num_pred
    recall = matches / num_gold
    return 2 * precision * recall / (precision + recall)


def _event_f1(pred_events, gold_events, thresholds, matcher) -> float:
    preds = [Interval.of(p) for p in pred_events]
    golds = [Interval.of(g) for g in gold_events]
    if not preds and not golds:
        return 100.0
    if not preds or not golds:
        return 0.0
    matrix = _iou_matrix(preds, golds)
    scores = [_f1(matcher(matrix, t), len(preds), len(golds)) for t in thresholds]
    return 100.0 * sum(scores) / len(scores)


def event_f1(pred_events: Sequence[IntervalLike], gold_events: Sequence[IntervalLike],
             thresholds: Sequence[float] = F1_THRESHOLDS) -> float:
    """
    Timestamp F1 of one video, averaged over IOU thresholds.

    Each threshold matches predictions to gold events greedily by descending
    IOU, one to one; F1 values are averaged after the harmonic mean.
    """
    return _event_f1(pred_events, gold_events, thresholds, _greedy_matches)


def event_f1_optimal(pred_events: Sequence[IntervalLike], gold_events: Sequence[IntervalLike],
                     thresholds: Sequence[float] = F1_THRESHOLDS) -> float:
    """event_f1 with a maximum-cardinality matching instead of the greedy one."""
    return _event_f1(pred_events, gold_events, thresholds, _optimal_matches)


def average_precision(tp: Sequence[bool], num_gold: int) -> float:
    """All-point interpolated AP of a ranked list of TP/FP flags."""
    if num_gold == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    tp_arr = np.asarray(tp, dtype=float)
    tp_cum = np.cumsum(tp_arr)
    fp_cum = np.cumsum(1.0 - tp_arr)
    rec = tp_cum / num_gold
    prec = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _ranked_hits(preds: Sequence[Tuple[Interval, float]], golds: Sequence[Interval], threshold: float) -> List[bool]:
    order = sorted(range(len(preds)), key=lambda k: -preds[k][1])
    matched = set()
    hits = []
    for k in order:
        interval = preds[k][0]
        best, best_iou = None, threshold
        for j, gold in enumerate(golds):
            if j in matched:
                continue
            value = iou(interval, gold)
            if value >= best_iou and (best is None or value > best_iou):
                best, best_iou = j, value
        if best is not None:
            matched.add(best)
        hits.append(best is not None)
    return hits


def interval_map(preds: Sequence[Tuple[IntervalLike, float]], golds: Sequence[IntervalLike],
                 thresholds: Sequence[float] = MAP_THRESHOLDS) -> float:
    """
    Interval mAP of one video.

    Args:
        preds: (interval, ranking score) pairs
        golds: Gold intervals
        thresholds: IOU thresholds averaged over

    Returns:
        Mean AP over thresholds, as a percentage
    """
    ranked = [(Interval.of(p), float(s)) for p, s in preds]
    gold_intervals = [Interval.of(g) for g in golds]
    aps = [average_precision(_ranked_hits(ranked, gold_intervals, t), len(gold_intervals)) for t in thresholds]
    return 100.0 * sum(aps) / len(aps)


def top_clip(clips: Sequence[ScoredClip]) -> ScoredClip:
    """Highest predicted score; ties go to the earliest start."""
    if not clips:
        raise ContractError("hit@1 needs at least one clip")
    return min(clips, key=lambda c: (-c.predicted_score, c.interval.start))


def hit_at_1(videos: Sequence[Sequence[ScoredClip]], gold_threshold: float = HIT_GOLD_THRESHOLD) -> float:
    """
    Percentage of videos whose top-scored clip has gold_score >= gold_threshold.

    Raises:
        ContractError: a video without clips, or a clip without a gold score
    """
    if not videos:
        return 0.0
    hits = 0
    for clips in videos:
        if any(clip.gold_score is None for clip in clips):
            raise ContractError("every clip needs a gold score for hit@1")
        hits += int(top_clip(clips).gold_score >= gold_threshold)
    return 100.0 * hits / len(videos)


class MetricReport(BaseModel):
    """Aggregated metrics of one task over a set of videos."""
    model_config = ConfigDict(frozen=True)

    task: TaskKind
    num_videos: int = 0
    metrics: Dict[str, float] = Field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task={self.task.value}", f"num_videos={self.num_videos}"]
        lines.extend(f"{key}={value:.2f}" for key, value in self.metrics.items())
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)


def _timed(response: Response) -> List[Event]:
    # inverted predicted intervals count as missing
    return [event for event in response.events if event.present_mask.has_time and event.start <= event.end]


def caption_matched_top1(pred: Response, gold_event: Event) -> Optional[Event]:
    """Earliest predicted event carrying the gold event's caption."""
    for event in _timed(pred):
        if event.caption == gold_event.caption:
            return event
    return None


def _mean(values: List[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def _hit_clips(pred: Response, gold: Response) -> List[ScoredClip]:
    """Predicted events as clips; the gold score is that of the best-overlapping gold event (0 if none)."""
    clips = []
    for event in _timed(pred):
        if event.score is None:
            continue
        overlaps = [(iou(event, g), g.score or 0.0) for g in _timed(gold)]
        best = max(overlaps, default=(0.0, 0.0))
        clips.append(ScoredClip(
            interval=Interval.of(event),
            predicted_score=event.score,
            gold_score=best[1] if best[0] > 0 else 0.0,
        ))
    return clips


def evaluate_task(task: Union[TaskKind, str], preds: Sequence[Response], golds: Sequence[Response]) -> MetricReport:
    """
    Metric set of one task over aligned per-video responses.

    mr: each gold response holds the query's interval; the first predicted
        event is the top-1 answer (R@1 at 0.3/0.5/0.7, mIOU).
    dvc: F1 (greedy and optimal) plus caption-matched R@1 and mIOU.
    vs: F1 (greedy and optimal).
    vhd: interval mAP ranked by predicted score, and HIT@1.
    general: exact caption accuracy.
    """
    task = TaskKind(task)
    _aligned(preds, golds)
    metrics: Dict[str, float] = {}

    if task is TaskKind.MR:
        top1 = [(_timed(p)[0] if _timed(p) else None) for p in preds]
        gold_iv = []
        for g in golds:
            if not _timed(g):
                raise ContractError("moment retrieval gold needs a timed event")
            gold_iv.append(_timed(g)[0])
        for t in RECALL_THRESHOLDS:
            metrics[f"r1@{t}"] = recall_at_1(top1, gold_iv, t)
        metrics["miou"] = mean_iou(top1, gold_iv)

    elif task in (TaskKind.DVC, TaskKind.VS):
        metrics["f1"] = _mean([event_f1(_timed(p), _timed(g)) for p, g in zip(preds, golds)])
        metrics["f1_optimal"] = _mean([event_f1_optimal(_timed(p), _timed(g)) for p, g in zip(preds, golds)])
        if task is TaskKind.DVC:
            queries = [(p, g_event) for p, g in zip(preds, golds) for g_event in _timed(g)]
            top1 = [caption_matched_top1(p, g_event) for p, g_event in queries]
            gold_iv = [g_event for _, g_event in queries]
            for t in RECALL_THRESHOLDS:
                metrics[f"r1@{t}"] = recall_at_1(top1, gold_iv, t)
            metrics["miou"] = mean_iou(top1, gold_iv)

    elif task is TaskKind.VHD:
        maps = []
        videos = []
        for p, g in zip(preds, golds):
            ranked = [(e, e.score if e.score is not None else 0.0) for e in _timed(p)]
            maps.append(interval_map(ranked, _timed(g)))
            clips = _hit_clips(p, g)
            if clips:
                videos.append(clips)
            else:
                videos.append([ScoredClip(interval=Interval(start=0.0, end=0.0), predicted_score=0.0, gold_score=0.0)])
        metrics["map"] = _mean(maps)
        metrics["hit@1"] = hit_at_1(videos)

    else:
        exact = [
            1.0 if [e.caption for e in p.events] == [e.caption for e in g.events] else 0.0
            for p, g in zip(preds, golds)
        ]
        metrics["caption_accuracy"] = 100.0 * _mean(exact)

    logger.debug(f"Evaluated {len(golds)} {task.value} videos: {metrics}")
    return MetricReport(task=task, num_videos=len(golds), metrics=metrics)
