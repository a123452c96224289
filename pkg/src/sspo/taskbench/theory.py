"""Closed-form check that lower noise-prediction error means a closer clean-data estimate.

For a predictor with a constant bias, ``eps_theta(x_t) = eps + b``, the
recovered clean sample ``(x_t - sqrt(1 - a_t) eps_theta) / sqrt(a_t)`` is the
true ``x_0`` shifted by ``-sqrt((1 - a_t) / a_t) * b``. With both laws
Gaussian with variance ``sigma0_sq * I`` the KL divergence is

    KL = (1 - a_t) / (2 * sigma0_sq * a_t) * |b|^2,

while the expected squared noise error is exactly ``|b|^2``. Both orderings
therefore agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..schedule import NoiseSchedule


def gaussian_kl(mu1, cov1, mu2, cov2) -> float:
    """KL(N(mu1, cov1) || N(mu2, cov2)) for full covariance matrices."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    d = len(mu1)
    inv2 = np.linalg.inv(cov2)
    diff = mu2 - mu1
    _, logdet1 = np.linalg.slogdet(cov1)
    _, logdet2 = np.linalg.slogdet(cov2)
    return float(0.5 * (np.trace(inv2 @ cov1) + diff @ inv2 @ diff - d + logdet2 - logdet1))


def bias_kl(s: NoiseSchedule, t: int, sigma0_sq: float, bias) -> float:
    """Closed-form KL for a constant-bias noise predictor."""
    ab = s.alpha_bar(t)
    b = np.asarray(bias, dtype=np.float64)
    return (1.0 - ab) / (2.0 * sigma0_sq * ab) * float(b @ b)


@dataclass(frozen=True)
class BiasCheck:
    kl_1: float
    kl_2: float
    kl_1_from_means: float
    kl_2_from_means: float
    mse_gap: float
    identity_error: float    # relative to max(1, KL)
    orderings_agree: bool


def theorem2_bias_check(s: NoiseSchedule, t: int, sigma0_sq: float, bias1, bias2,
                        x0_mean=None) -> BiasCheck:
    """Compare the KL and noise-MSE orderings of two biased predictors.

    The ``*_from_means`` values recompute each KL with the general Gaussian
    formula applied to the explicit clean-sample means, independently of the
    closed form.
    """
    if not sigma0_sq > 0:
        raise ValueError("sigma0_sq must be positive")
    ab = s.alpha_bar(t)
    b1 = np.asarray(bias1, dtype=np.float64)
    b2 = np.asarray(bias2, dtype=np.float64)
    mu0 = np.zeros_like(b1) if x0_mean is None else np.asarray(x0_mean, dtype=np.float64)
    cov = sigma0_sq * np.eye(len(b1))
    shift = np.sqrt((1.0 - ab) / ab)
    kl1_m = gaussian_kl(mu0 - shift * b1, cov, mu0, cov)
    kl2_m = gaussian_kl(mu0 - shift * b2, cov, mu0, cov)
    kl1 = bias_kl(s, t, sigma0_sq, b1)
    kl2 = bias_kl(s, t, sigma0_sq, b2)
    mse_gap = float(b1 @ b1 - b2 @ b2)
    err = max(abs(kl1 - kl1_m) / max(1.0, abs(kl1)), abs(kl2 - kl2_m) / max(1.0, abs(kl2)))
    agree = np.sign(kl1 - kl2) == np.sign(mse_gap)
    return BiasCheck(kl1, kl2, kl1_m, kl2_m, mse_gap, float(err), bool(agree))
