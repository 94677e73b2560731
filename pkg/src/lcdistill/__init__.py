"""Latent consistency distillation of a conditional diffusion denoiser on synthetic latents."""

from .ddim import ddim_chain, ddim_step, guided_target
from .denoiser import Condition, DenoiserModel, DivergenceError, ModelConfig
from .diffusion import ancestral_sample, forward_sample, train_teacher
from .lcd import BoundaryScaling, consistency_fn, distill, distill_step, make_lcd_state
from .lcm import TimestepSequence, convert, lcm_sample, make_tau_sequence
from .schedule import ConfigError, NoiseSchedule, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "BoundaryScaling",
    "Condition",
    "ConfigError",
    "DenoiserModel",
    "DivergenceError",
    "ModelConfig",
    "NoiseSchedule",
    "TimestepSequence",
    "ancestral_sample",
    "consistency_fn",
    "convert",
    "ddim_chain",
    "ddim_step",
    "distill",
    "distill_step",
    "forward_sample",
    "guided_target",
    "lcm_sample",
    "make_lcd_state",
    "make_linear_schedule",
    "make_tau_sequence",
    "train_teacher",
]
