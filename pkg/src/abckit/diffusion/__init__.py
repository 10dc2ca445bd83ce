"""DDPM-style core: schedule, denoiser, training, sampling, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import Architecture, DenoiserParams, init_params, predict, tangent_predict
from .sampler import ExogenousNoise, draw_exogenous, sample, step_coefficients, update
from .schedule import Schedule, forward_noising, make_schedule
from .train import TrainConfig, train_denoiser

__all__ = [
    "Architecture",
    "DenoiserParams",
    "ExogenousNoise",
    "Schedule",
    "TrainConfig",
    "draw_exogenous",
    "forward_noising",
    "init_params",
    "load_checkpoint",
    "make_schedule",
    "predict",
    "sample",
    "save_checkpoint",
    "step_coefficients",
    "tangent_predict",
    "train_denoiser",
    "update",
]
