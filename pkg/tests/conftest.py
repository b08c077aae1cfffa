"""
Shared fixtures for the test suite.
"""

import os

# keep test runs from writing rotating log files
os.environ.setdefault("VTG_LOG_TO_FILE", "0")

import numpy as np
import pytest

from src.config.config import load_run_config
from src.core.events import Event, Response, TaskKind, VideoSample


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smoke_config(tmp_path):
    return load_run_config(preset="smoke", overrides={"output_dir": tmp_path})


@pytest.fixture
def tiny_config(tmp_path):
    """Smallest model that still exercises every parameter group."""
    return load_run_config(preset="smoke", overrides={
        "output_dir": tmp_path,
        "num_frames": 2,
        "slots_per_frame": 2,
        "patch_count": 2,
        "feature_dim": 3,
        "d_model": 8,
        "n_layers": 1,
        "n_heads": 2,
        "model_max_length": 128,
    })


def make_sample(num_frames=2, duration=10.0, events=None, task_kind=TaskKind.DVC,
                instruction="find it", patch_count=2, feature_dim=3, seed=0, video_id="sample"):
    """A small sample with uniform frame times and random features."""
    if events is None:
        events = [Event.for_task(task_kind, caption="wash", start=1.0, end=4.0,
                                 score=3.0 if task_kind in (TaskKind.VHD, TaskKind.VS) else None)]
    step = duration / num_frames
    times = tuple(round(step * (i + 0.5), 1) for i in range(num_frames))
    features = np.random.default_rng(seed).normal(size=(num_frames, patch_count, feature_dim))
    return VideoSample(
        video_id=video_id,
        frame_features=features,
        frame_times=times,
        duration=duration,
        instruction=instruction,
        gold=Response(events=tuple(events)),
        task_kind=task_kind,
    )


@pytest.fixture
def sample_factory():
    return make_sample


def random_response(rng, task_kind=TaskKind.DVC, max_events=4, duration=500.0):
    """Sorted random response with one-decimal values and simple captions."""
    count = int(rng.integers(1, max_events + 1))
    events = []
    for _ in range(count):
        a, b = sorted(np.round(rng.uniform(0, duration, size=2), 1))
        score = float(np.round(rng.uniform(1.0, 5.0), 1))
        words = rng.choice(["cut", "wash", "stir", "pour", "mix"], size=int(rng.integers(1, 4)))
        events.append(Event.for_task(task_kind, caption=" ".join(words), start=float(a), end=float(b), score=score))
    events.sort(key=lambda e: (e.start, e.end))
    return Response(events=tuple(events))
