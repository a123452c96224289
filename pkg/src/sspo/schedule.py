"""Constant-alpha forward diffusion.

Every step keeps a fraction ``alpha`` of the signal, so the cumulative
coefficient after ``t`` steps is ``alpha**t`` and

    x_t = sqrt(alpha**t) * x_0 + sqrt(1 - alpha**t) * eps.

``sigma_t_sq`` is implemented with the half-power exponent ``(t - 1) / 2``
exactly as written in the method's derivation. It is *not* the usual DDPM
posterior variance ``(1 - alpha)(1 - alpha**(t-1)) / (1 - alpha**t)``; the
sampler uses it regardless so the two stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeight, ShapeMismatch, TimestepOutOfRange
from .numerics import as_tensor

WEIGHTING_MODES = ("constant", "exact")


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: float = 0.9
    T: int = 50
    weighting_mode: str = "constant"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"T must be an integer >= 2, got {self.T}")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ValueError(f"weighting_mode must be one of {WEIGHTING_MODES}")

    @property
    def t_min(self) -> int:
        """Smallest timestep with a defined loss weight."""
        return 2 if self.weighting_mode == "exact" else 1

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T) or np.any(t_arr != np.floor(t_arr)):
            raise TimestepOutOfRange(f"timestep {t} outside [1, {self.T}]")

    def alpha_bar(self, t):
        self.check_t(t)
        return self.alpha ** np.asarray(t, dtype=np.float64) if np.ndim(t) else self.alpha ** int(t)

    def sigma_t_sq(self, t):
        self.check_t(t)
        a = self.alpha
        t = np.asarray(t, dtype=np.float64)
        out = (1.0 - a) * (1.0 - a ** ((t - 1.0) / 2.0)) / (1.0 - a ** t)
        return out if out.ndim else float(out)

    def weight_w_t(self, t):
        self.check_t(t)
        if self.weighting_mode == "constant":
            return np.ones(np.shape(t)) if np.ndim(t) else 1.0
        if np.any(np.asarray(t) < 2):
            raise DegenerateWeight("w_1 is undefined in exact mode (sigma_1^2 = 0)")
        a = self.alpha
        t = np.asarray(t, dtype=np.float64)
        out = (1.0 - a) ** 2 * a ** (t - 1.0) / (2.0 * self.sigma_t_sq(t) * (1.0 - a ** t) ** 2)
        return out if out.ndim else float(out)

    def forward_diffuse(self, x0, t, eps):
        """Noise ``x0`` to step ``t``. Batched inputs take one ``t`` per row."""
        x0, eps = as_tensor(x0), as_tensor(eps)
        if x0.shape != eps.shape:
            raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
        ab = self.alpha_bar(t)
        if np.ndim(ab):
            ab = np.asarray(ab).reshape(-1, *([1] * (x0.ndim - 1)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def sample_t(self, rng, size=None):
        """Draw ``t`` uniformly from ``[t_min, T]``."""
        lo = self.t_min
        return lo + rng.integers(self.T - lo + 1, size)
