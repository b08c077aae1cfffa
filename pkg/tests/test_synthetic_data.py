import numpy as np
import pytest

from src.config.config import load_run_config
from src.core.errors import ContractError
from src.core.events import Response, TaskKind, validate_response
from src.core.synthetic_data import (
    CLASS_CAPTIONS,
    class_caption,
    frame_labels,
    generate_dataset,
    make_splits,
    oracle_frame_accuracy,
    sample_from_record,
)
from src.core.tokenizers import round_one_decimal


@pytest.fixture
def data_config(tmp_path):
    return load_run_config(preset="smoke", overrides={
        "output_dir": tmp_path,
        "num_frames": 16,
        "max_events": 3,
        "num_classes": 3,
        "train_size": 6,
        "test_size": 3,
    })


def test_same_seed_same_data(data_config):
    a = generate_dataset(data_config, 5, "train")
    b = generate_dataset(data_config, 5, "train")
    for x, y in zip(a, b):
        assert x.video_id == y.video_id
        assert np.array_equal(x.frame_features, y.frame_features)
        assert x.gold == y.gold


def test_splits_share_class_means_but_not_samples(data_config):
    train, test = make_splits(data_config)
    assert len(train) == 6 and len(test) == 3
    assert train.samples[0].video_id == "train-00000"
    assert test.samples[2].video_id == "test-00002"
    assert np.array_equal(train.class_means, test.class_means)
    assert not np.array_equal(train.samples[0].frame_features, test.samples[0].frame_features)


def test_other_seed_changes_data(data_config):
    a = generate_dataset(data_config, 1, "train", seed=1)
    b = generate_dataset(data_config, 1, "train", seed=2)
    assert not np.array_equal(a.samples[0].frame_features, b.samples[0].frame_features)


def test_gold_answers_are_valid(data_config):
    dataset = generate_dataset(data_config, 40, "train")
    for sample in dataset:
        assert sample.task_kind is TaskKind.DVC
        assert sample.frame_features.shape == (16, 2, 8)
        assert data_config.min_events <= len(sample.gold) <= data_config.max_events
        report = validate_response(sample.gold, sample.duration, data_config.k_max, TaskKind.DVC)
        assert report.is_valid, report.codes()
        ends = [e.end for e in sample.gold.events]
        starts = [e.start for e in sample.gold.events]
        assert all(prev_end < start for prev_end, start in zip(ends, starts[1:]))


def test_event_boundaries_sit_on_frame_times(data_config):
    for sample in generate_dataset(data_config, 20, "test"):
        rounded = {round_one_decimal(t) for t in sample.frame_times}
        for event in sample.gold.events:
            assert event.start in rounded
            assert event.end in rounded
            assert event.caption in CLASS_CAPTIONS


def test_clip_random_frames_stay_in_their_clip(data_config):
    config = data_config.model_copy(update={"frame_sample": "clip_random"})
    for sample in generate_dataset(config, 20, "train"):
        step = sample.duration / sample.num_frames
        for i, t in enumerate(sample.frame_times):
            assert i * step < t < (i + 1) * step
        assert list(sample.frame_times) == sorted(sample.frame_times)


def test_nearest_mean_oracle_recovers_frames(data_config):
    config = data_config.model_copy(update={"feature_dim": 16, "patch_count": 4})
    dataset = generate_dataset(config, 50, "train")
    assert oracle_frame_accuracy(dataset) > 0.99


def test_frame_labels_mark_event_frames(data_config):
    dataset = generate_dataset(data_config, 1, "train")
    sample = dataset.samples[0]
    labels = frame_labels(sample, dataset.captions)
    assert (labels >= 0).sum() >= len(sample.gold)
    assert labels.min() >= -1


def test_too_many_events_for_frames(data_config):
    config = data_config.model_copy(update={"num_frames": 2, "min_events": 3, "max_events": 3})
    with pytest.raises(ContractError):
        generate_dataset(config, 1)


def test_class_caption_beyond_the_list():
    assert class_caption(0) == CLASS_CAPTIONS[0]
    assert class_caption(len(CLASS_CAPTIONS)) == f"event number {len(CLASS_CAPTIONS)} happens"


def test_sample_from_record_is_featureless():
    sample = sample_from_record("v", 20.0, "find", Response(), TaskKind.MR, num_frames=4, patch_count=2, feature_dim=3)
    assert sample.frame_features.shape == (4, 2, 3)
    assert not sample.frame_features.any()
    assert sample.frame_times == (2.5, 7.5, 12.5, 17.5)
