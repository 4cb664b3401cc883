"""Coarse-to-fine diffusion Transformer for image restoration."""

from .network import DftConfig, DftModel
from .sampler import SamplerPlan, sample_restore, timestep_grid
from .schedule import DiffusionSchedule, make_schedule, q_sample, q_step

__all__ = [
    "DftConfig",
    "DftModel",
    "DiffusionSchedule",
    "SamplerPlan",
    "make_schedule",
    "q_sample",
    "q_step",
    "sample_restore",
    "timestep_grid",
]
