"""Toy conditional 2D mixture task and sample-based evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import ConditionOutOfRange, EmptySet
from ..numerics import SeededRng
from ..policy import Policy, ancestral_sample_batch
from ..schedule import NoiseSchedule


@dataclass(frozen=True)
class Component:
    mean: tuple
    std: float
    weight: float


@dataclass(frozen=True)
class MixtureTask:
    """Per-condition Gaussian mixtures: a broad base and a tight target."""

    cond_cardinality: int
    base_mixture: tuple
    target_mixture: tuple

    def __post_init__(self):
        for name in ("base_mixture", "target_mixture"):
            mix = getattr(self, name)
            if len(mix) != self.cond_cardinality:
                raise ValueError(f"{name} needs one entry per condition")
            for comps in mix:
                if not math.isclose(sum(c.weight for c in comps), 1.0, abs_tol=1e-12):
                    raise ValueError(f"{name} weights must sum to 1")
                if any(c.std <= 0 for c in comps):
                    raise ValueError(f"{name} stds must be positive")

    def check_condition(self, c):
        c = np.asarray(c)
        if np.any(c < 0) or np.any(c >= self.cond_cardinality):
            raise ConditionOutOfRange(f"condition {c} outside [0, {self.cond_cardinality})")

    def mean(self, c, which="target") -> np.ndarray:
        comps = (self.target_mixture if which == "target" else self.base_mixture)[c]
        return sum(comp.weight * np.asarray(comp.mean, dtype=float) for comp in comps)


def toy_task(n_cond=3, radius=2.0, base_std=0.8, base_spread=1.0,
             target_std=0.25, target_shift=0.5, target_offset=1.0) -> MixtureTask:
    """Conditions sit at evenly spaced angles around the origin.

    Base: two equal components at ``radius * u +/- base_spread * v``.
    Target: one tight component at ``(radius + target_shift) * u + target_offset * v``,
    i.e. an outward-shifted, sharpened version of one base mode.
    """
    base, target = [], []
    for c in range(n_cond):
        phi = 2.0 * math.pi * c / n_cond + math.pi / 2.0
        u = np.array([math.cos(phi), math.sin(phi)])
        v = np.array([-math.sin(phi), math.cos(phi)])
        base.append((Component(tuple(radius * u + base_spread * v), base_std, 0.5),
                     Component(tuple(radius * u - base_spread * v), base_std, 0.5)))
        centre = (radius + target_shift) * u + target_offset * v
        target.append((Component(tuple(centre), target_std, 1.0),))
    return MixtureTask(n_cond, tuple(base), tuple(target))


def task_from_params(p) -> MixtureTask:
    return toy_task(p.n_cond, p.radius, p.base_std, p.base_spread,
                    p.target_std, p.target_shift, p.target_offset)


def _draw(mixtures, conds, rng: SeededRng) -> np.ndarray:
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    n = len(conds)
    u = rng.uniform(n)
    z = rng.normal((n, 2))
    out = np.empty((n, 2))
    for i, c in enumerate(conds):
        comps = mixtures[c]
        cum = np.cumsum([comp.weight for comp in comps])
        comp = comps[min(int(np.searchsorted(cum, u[i], side="right")), len(comps) - 1)]
        out[i] = np.asarray(comp.mean) + comp.std * z[i]
    return out


def draw_winning(task: MixtureTask, c: int, rng: SeededRng, n: int) -> np.ndarray:
    """``n`` iid draws (rows) from the target mixture of condition ``c``."""
    task.check_condition(c)
    return _draw(task.target_mixture, np.full(n, c), rng)


def draw_winning_batch(task: MixtureTask, conds, rng: SeededRng) -> np.ndarray:
    task.check_condition(conds)
    return _draw(task.target_mixture, conds, rng)


def draw_base_batch(task: MixtureTask, conds, rng: SeededRng) -> np.ndarray:
    task.check_condition(conds)
    return _draw(task.base_mixture, conds, rng)


def _mean_pairwise(a, b, chunk=2048) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` over all empirical pairs (V-statistic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptySet("energy distance needs two non-empty samples")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    out = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(out, 0.0)


@dataclass(frozen=True)
class EvalReport:
    per_condition: tuple
    energy_distance: float   # mean of per_condition; lower is better
    eps_mse: float
    n_samples: int


def heldout_eps_mse(policy: Policy, mixtures, schedule: NoiseSchedule, rng: SeededRng, n: int) -> float:
    """Monte-Carlo estimate of the weighted noise-regression loss on fresh data."""
    conds = rng.integers(len(mixtures), n)
    x0 = _draw(mixtures, conds, rng)
    t = schedule.sample_t(rng, n)
    eps = rng.normal((n, x0.shape[1]))
    xt = schedule.forward_diffuse(x0, t, eps)
    err = np.mean((policy.predict_eps(xt, t, conds) - eps) ** 2, axis=1)
    return float(np.mean(np.asarray(schedule.weight_w_t(t)) * err))


def evaluate(policy: Policy, task: MixtureTask, schedule: NoiseSchedule, rng: SeededRng,
             n_per_cond: int = 512) -> EvalReport:
    """Sample ``n_per_cond`` points per condition and compare them to target draws.

    All randomness comes from children of ``rng``, so re-evaluating different
    policies with the same ``rng`` uses common random numbers.
    """
    conds = np.repeat(np.arange(task.cond_cardinality), n_per_cond)
    generated = ancestral_sample_batch(policy, conds, rng.child(0), schedule)
    reference = draw_winning_batch(task, conds, rng.child(1))
    per = tuple(energy_distance(generated[conds == c], reference[conds == c])
                for c in range(task.cond_cardinality))
    mse = heldout_eps_mse(policy, task.target_mixture, schedule, rng.child(2), n_per_cond)
    return EvalReport(per, float(np.mean(per)), mse, n_per_cond)
