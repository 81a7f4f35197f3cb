"""Denoising diffusion core: schedule, stage models, sampler, trainers."""

from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .stages import (
    DetailStage,
    StageConfig,
    TSDAlignStage,
    load_stage,
    save_stage,
    stage_config_hash,
)
from .sampling import align_tsd, sample_image, sample_loop, synthesize_sequence
from .training import TrainConfig, train_fcsd, train_tsdm

__all__ = [
    "NoiseSchedule", "forward_diffuse", "make_schedule",
    "StageConfig", "TSDAlignStage", "DetailStage",
    "save_stage", "load_stage", "stage_config_hash",
    "sample_loop", "sample_image", "align_tsd", "synthesize_sequence",
    "TrainConfig", "train_tsdm", "train_fcsd",
]
