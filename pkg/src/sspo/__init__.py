"""Checkpoint-replay preference alignment for a toy conditional diffusion model."""

from .alignment import (ErrorQuad, LossBreakdown, SsrMode, analytic_gradient_weight,
                        batch_diagnostics, compute_sign, sspo_pair_loss, ssr_loss)
from .config import TrainConfig
from .numerics import ParamVector, SeededRng
from .policy import Policy, PolicySpec, ancestral_sample, load_params, save_params
from .replay import CheckpointStore, ErdStrategy
from .schedule import NoiseSchedule

__version__ = "0.1.0"
