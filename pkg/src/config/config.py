import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, field_validator

# Load environment variables from .env file
load_dotenv()


class Config:
    OUTPUT_DIR = os.getenv('VTG_OUTPUT_DIR', 'output')
    LOG_DIR = os.getenv('VTG_LOG_DIR', 'logs')
    LOG_LEVEL = os.getenv('VTG_LOG_LEVEL', 'INFO')
    LOG_TO_FILE = os.getenv('VTG_LOG_TO_FILE', '1') not in ('0', 'false', 'False', '')
    DEFAULT_SEED = int(os.getenv('VTG_SEED', '0'))


class RunConfig(BaseModel):
    """
    Settings for one training/generation/evaluation run.

    Field names follow the rows of the training-settings table (learning rate,
    scheduler, epochs, batch size, frame count, max length) so a config file can
    be audited against it line by line.
    """
    seed: int = Field(Config.DEFAULT_SEED, ge=0, description="Seed for every random generator of the run")

    # training-settings table
    learning_rate: PositiveFloat = Field(1e-3, description="Peak Adam learning rate")
    lr_scheduler: Literal["cosine", "constant"] = Field("cosine", description="Learning-rate schedule")
    train_epochs: PositiveInt = Field(40, description="Number of passes over the training split")
    batch_size: PositiveInt = Field(16, description="Samples per optimizer step")
    num_frames: PositiveInt = Field(128, description="Frames sampled per video")
    frame_sample: Literal["uniform", "clip_random"] = Field("uniform", description="Frame sampling strategy")
    model_max_length: PositiveInt = Field(4096, description="Maximum sequence length in positions")

    # sequence layout
    slots_per_frame: PositiveInt = Field(8, description="Visual slots per frame after compression")
    k_max: PositiveInt = Field(50, description="Maximum number of events per response")
    append_stop: bool = Field(True, description="Append the empty stop event to training sequences")

    # toy network
    d_model: PositiveInt = Field(64, le=128, description="Trunk width")
    n_layers: PositiveInt = Field(2, le=4, description="Transformer layers")
    n_heads: PositiveInt = Field(4, le=4, description="Attention heads per layer")
    patch_count: PositiveInt = Field(4, description="Patch features per frame")
    feature_dim: PositiveInt = Field(16, description="Dimension of each patch feature")

    # synthetic data
    train_size: PositiveInt = Field(1000, description="Training samples")
    test_size: PositiveInt = Field(200, description="Test samples")
    min_events: PositiveInt = Field(1, description="Fewest planted events per video")
    max_events: PositiveInt = Field(3, description="Most planted events per video")
    num_classes: PositiveInt = Field(4, description="Number of planted event classes")
    min_duration: PositiveFloat = Field(30.0, description="Shortest synthetic video in seconds")
    max_duration: PositiveFloat = Field(90.0, description="Longest synthetic video in seconds")

    # decoding
    decode_policy: Literal["greedy", "top_k"] = Field("greedy", description="Sampling policy")
    top_k: PositiveInt = Field(5, description="Candidates kept by the top-k policy")
    constrained: bool = Field(False, description="Enforce the fixed-width digit grammar while decoding")
    max_new_tokens: PositiveInt = Field(512, description="Token budget per generation")

    # evaluation
    eval_every: int = Field(0, ge=0, description="Evaluate every N epochs (0 disables periodic eval)")
    eval_samples: PositiveInt = Field(16, description="Test samples decoded during periodic eval")

    # paths
    output_dir: Path = Field(Path(Config.OUTPUT_DIR), description="Directory for run artefacts")
    checkpoint_path: Optional[Path] = Field(None, description="Checkpoint file (default: <output_dir>/toy_net.pt)")

    @field_validator('max_events')
    @classmethod
    def validate_event_bounds(cls, v, info):
        min_events = info.data.get('min_events')
        if min_events is not None and v < min_events:
            raise ValueError("max_events must be >= min_events")
        return v

    @field_validator('max_duration')
    @classmethod
    def validate_duration_bounds(cls, v, info):
        min_duration = info.data.get('min_duration')
        if min_duration is not None and v < min_duration:
            raise ValueError("max_duration must be >= min_duration")
        return v

    @property
    def resolved_checkpoint_path(self) -> Path:
        return self.checkpoint_path or self.output_dir / "toy_net.pt"


PRESETS: Dict[str, Dict[str, Any]] = {
    # finishes in a few minutes on a laptop CPU
    "smoke": {
        "num_frames": 8,
        "patch_count": 2,
        "feature_dim": 8,
        "d_model": 32,
        "n_layers": 1,
        "n_heads": 2,
        "train_size": 4,
        "test_size": 4,
        "batch_size": 4,
        "train_epochs": 150,
        "learning_rate": 3e-3,
        "min_events": 1,
        "max_events": 1,
        "num_classes": 2,
        "model_max_length": 256,
        "max_new_tokens": 64,
    },
    # learning demonstration
    "default": {
        "num_frames": 64,
        "train_epochs": 12,
        "model_max_length": 1280,
        "max_new_tokens": 128,
    },
    # values of the training-settings table
    "full": {
        "learning_rate": 1e-3,
        "lr_scheduler": "cosine",
        "train_epochs": 1,
        "batch_size": 128,
        "num_frames": 128,
        "model_max_length": 4096,
    },
}


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    preset: str = "default",
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig from a preset, an optional key=value file and overrides.

    Args:
        path: Flat key=value config file (read with python-dotenv)
        preset: Name of the preset providing the base values
        overrides: Values taking precedence over both (e.g. CLI flags)

    Returns:
        Validated RunConfig
    """
    if preset not in PRESETS:
        raise ValueError(f"Unknown preset '{preset}'. Choose one of {sorted(PRESETS)}")

    values: Dict[str, Any] = dict(PRESETS[preset])

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        file_values = dotenv_values(path)
        unknown = set(file_values) - set(RunConfig.model_fields)
        if unknown:
            raise ValueError(f"Unknown config keys in {path}: {sorted(unknown)}")
        values.update({k: v for k, v in file_values.items() if v is not None})

    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    return RunConfig(**values)


def dump_run_config(config: RunConfig) -> str:
    """Render a RunConfig as the flat key=value text load_run_config reads."""
    lines = []
    for key, value in config.model_dump().items():
        if value is None:
            continue
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


class PipelineConfig(BaseModel):
    """Constants of the annotation filtering and score-binning pipeline."""
    min_caption_words: PositiveInt = Field(5, description="Captions with fewer words are rejected")
    similarity_threshold: int = Field(70, ge=0, le=100, description="Caption pairs above this fuzzy score are rejected")
    min_event_count: PositiveInt = Field(5, description="Videos with fewer events are rejected")
    max_event_count: PositiveInt = Field(50, description="Videos with more events are rejected")
    caption_charset: str = Field(r"[A-Za-z .]", description="Regex class of characters allowed in captions")
    max_clips: PositiveInt = Field(20, description="Maximum clips per event")
    min_clip_len: PositiveFloat = Field(1.0, description="Minimum clip length in seconds")
    floor_score: float = Field(1.0, description="Score for clips below the lowest percentile threshold")
    single_clip_score: float = Field(3.0, description="Score assigned when only one clip is ranked")
    percentile_scope: Literal["video", "event"] = Field("video", description="Clips ranked against the whole video or only their own event")
    mr_annotation_source: str = Field("internvid-10m-flt-info", description="Annotation source accepted for moment retrieval")
