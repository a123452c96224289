"""Toy task, evaluation, analytic checks and multi-seed studies."""

from .tasks import (EvalReport, MixtureTask, draw_winning, energy_distance, evaluate,
                    toy_task)
from .theory import BiasCheck, theorem2_bias_check
from .studies import run_ablation_suite, run_erd_study
