"""
Synthetic Data Module for the event-grounding toolkit.

Generates planted-event videos: frames inside a gold event interval draw their
patch features around the event class's mean, background frames around zero.
Event boundaries sit on frame timestamps, so a model that reads the frame-time
tokens can copy them into its answer.
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config.config import RunConfig
from src.core.errors import ContractError
from src.core.events import Event, Response, TaskKind, VideoSample
from src.core.tokenizers import round_one_decimal
from src.utils.logging_utils import get_logger

logger = get_logger(__name__)

DVC_INSTRUCTION = "Localize and describe the events in the video."
CLASS_CAPTIONS = (
    "a person opens the door",
    "a dog runs across the yard",
    "a man pours water into a glass",
    "a woman waves at the camera",
    "a car drives past the house",
    "a child kicks a red ball",
    "a cat jumps onto the table",
    "a chef slices an onion",
)
CLASS_MEAN_SCALE = 3.0
NOISE_SCALE = 0.5


def class_caption(label: int) -> str:
    if label < len(CLASS_CAPTIONS):
        return CLASS_CAPTIONS[label]
    return f"event number {label} happens"


def uniform_frame_times(duration: float, num_frames: int) -> List[float]:
    """Centre of each of num_frames equal clips."""
    step = duration / num_frames
    return [(i + 0.5) * step for i in range(num_frames)]


def clip_random_frame_times(duration: float, num_frames: int, rng: np.random.Generator) -> List[float]:
    """Split the video into num_frames equal clips and draw one frame time inside each."""
    step = duration / num_frames
    # keep a margin so neighbouring draws never coincide
    offsets = rng.uniform(0.1, 0.9, size=num_frames)
    return [(i + offsets[i]) * step for i in range(num_frames)]


class SyntheticDataset(BaseModel):
    """Planted-event samples plus the class means that generated them."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    samples: List[VideoSample] = Field(default_factory=list)
    class_means: np.ndarray = Field(..., description="(num_classes, feature_dim) class means")
    seed: int = Field(0, description="Generator seed")
    split: str = Field("train", description="Split name used in video ids")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> Dict[str, VideoSample]:
        return {sample.video_id: sample for sample in self.samples}

    @property
    def captions(self) -> List[str]:
        return [class_caption(label) for label in range(self.class_means.shape[0])]


def _plant_events(num_frames: int, num_events: int, rng: np.random.Generator) -> List[tuple]:
    """Disjoint (first_frame, last_frame) index ranges, one inside each of num_events equal zones."""
    zone = num_frames // num_events
    if zone < 1:
        raise ContractError(f"{num_frames} frames cannot hold {num_events} events")
    ranges = []
    for z in range(num_events):
        lo = z * zone
        shortest = max(1, zone // 4)
        longest = max(shortest, zone // 2)
        length = int(rng.integers(shortest, longest + 1))
        first = lo + int(rng.integers(0, zone - length + 1))
        ranges.append((first, first + length - 1))
    return ranges


def generate_sample(config: RunConfig, class_means: np.ndarray, rng: np.random.Generator,
                    video_id: str) -> VideoSample:
    """One planted-event video following config's sizes and frame sampling."""
    T = config.num_frames
    duration = round_one_decimal(float(rng.uniform(config.min_duration, config.max_duration)))
    if config.frame_sample == "clip_random":
        frame_times = clip_random_frame_times(duration, T, rng)
    else:
        frame_times = uniform_frame_times(duration, T)

    num_events = int(rng.integers(config.min_events, config.max_events + 1))
    ranges = _plant_events(T, num_events, rng)
    labels = rng.integers(0, class_means.shape[0], size=num_events)

    frame_means = np.zeros((T, config.feature_dim))
    events = []
    for (first, last), label in zip(ranges, labels):
        frame_means[first:last + 1] = class_means[label]
        events.append(Event.for_task(
            TaskKind.DVC,
            caption=class_caption(int(label)),
            start=round_one_decimal(frame_times[first]),
            end=round_one_decimal(frame_times[last]),
        ))

    noise = rng.normal(0.0, NOISE_SCALE, size=(T, config.patch_count, config.feature_dim))
    features = frame_means[:, None, :] + noise

    return VideoSample(
        video_id=video_id,
        frame_features=features,
        frame_times=tuple(frame_times),
        duration=duration,
        instruction=DVC_INSTRUCTION,
        gold=Response(events=tuple(events)),
        task_kind=TaskKind.DVC,
    )


def make_class_means(config: RunConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(config.num_classes, config.feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * CLASS_MEAN_SCALE


def generate_dataset(config: RunConfig, size: int, split: str = "train",
                     seed: Optional[int] = None) -> SyntheticDataset:
    """
    Generate a planted-event dataset.

    Class means depend only on the run seed, so train and test splits share
    them; each split draws its videos from its own stream.

    Args:
        config: Run configuration (sizes, frame sampling, event counts)
        size: Number of samples
        split: Split name; also selects the sample stream
        seed: Overrides config.seed

    Returns:
        SyntheticDataset
    """
    seed = config.seed if seed is None else seed
    class_means = make_class_means(config, seed)
    stream = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([seed, stream])
    samples = [generate_sample(config, class_means, rng, f"{split}-{index:05d}") for index in range(size)]
    logger.debug(f"Generated {size} {split} samples (seed {seed})")
    return SyntheticDataset(samples=samples, class_means=class_means, seed=seed, split=split)


def make_splits(config: RunConfig) -> tuple:
    """(train, test) datasets of the configured sizes."""
    return (
        generate_dataset(config, config.train_size, "train"),
        generate_dataset(config, config.test_size, "test"),
    )


def frame_labels(sample: VideoSample, captions: Sequence[str]) -> np.ndarray:
    """Gold class per frame, -1 for background."""
    labels = np.full(sample.num_frames, -1)
    index_of = {caption: label for label, caption in enumerate(captions)}
    for event in sample.gold.events:
        for f, t in enumerate(sample.frame_times):
            if event.start <= round_one_decimal(t) <= event.end:
                labels[f] = index_of[event.caption]
    return labels


def nearest_mean_oracle(dataset: SyntheticDataset, sample: VideoSample) -> np.ndarray:
    """Label each frame with the nearest class mean (zero vector = background)."""
    frames = sample.frame_features.mean(axis=1)
    candidates = np.vstack([np.zeros((1, dataset.class_means.shape[1])), dataset.class_means])
    distances = np.linalg.norm(frames[:, None, :] - candidates[None, :, :], axis=-1)
    return distances.argmin(axis=1) - 1


def oracle_frame_accuracy(dataset: SyntheticDataset) -> float:
    """Fraction of frames the nearest-mean oracle labels correctly."""
    correct = 0
    total = 0
    for sample in dataset.samples:
        predicted = nearest_mean_oracle(dataset, sample)
        gold = frame_labels(sample, dataset.captions)
        correct += int((predicted == gold).sum())
        total += sample.num_frames
    return correct / total if total else 1.0


def sample_from_record(video_id: str, duration: float, instruction: str, gold: Response,
                       task_kind: TaskKind, num_frames: int, patch_count: int = 1,
                       feature_dim: int = 1) -> VideoSample:
    """A featureless sample (zero features, uniform frame times) for laying out an annotation."""
    return VideoSample(
        video_id=video_id,
        frame_features=np.zeros((num_frames, patch_count, feature_dim)),
        frame_times=tuple(uniform_frame_times(duration, num_frames)),
        duration=duration,
        instruction=instruction,
        gold=gold,
        task_kind=task_kind,
    )
