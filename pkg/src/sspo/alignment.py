"""Preference losses for diffusion policies with a replayed reference.

Four per-sample squared errors drive everything (each is a mean over
elements)::

    model_w = |eps_theta(x_t^w)    - eps^w  |^2     ref_w = |eps_ref(x_t^w)    - eps^w  |^2
    model_r = |eps_theta(x_t^rand) - eps^ref|^2     ref_r = |eps_ref(x_t^rand) - eps^ref|^2

and the loss is ``-log sigmoid(inside)`` with

    inside = -scale * ((model_w - ref_w) - sign * (model_r - ref_r)),
    sign   = +1 if ref_w - model_w > 0 else -1.

``sign = +1`` is the plain diffusion-DPO contrast (the replayed sample is a
loser). ``sign = -1`` turns the replayed term into a second regression
target, so both errors are pushed down as in supervised fine-tuning.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import EmptyBatch, NonPositiveScale
from .numerics import ParamVector
from .policy import Policy, features, mlp
from .schedule import NoiseSchedule


class SsrMode(enum.Enum):
    OFF = "off"              # sign fixed at +1
    SIGN = "sign"            # full sign switch
    INDICATOR = "indicator"  # drop the replayed terms instead of flipping them

    @classmethod
    def parse(cls, text) -> "SsrMode":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        return cls({"none": "off", "sgn": "sign", "full": "sign"}.get(key, key))


@dataclass(frozen=True)
class ErrorQuad:
    model_w: float
    ref_w: float
    model_r: float
    ref_r: float

    def __post_init__(self):
        for name in ("model_w", "ref_w", "model_r", "ref_r"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @property
    def sigma_w(self) -> float:
        """Winner error gap between the current and reference models."""
        return self.model_w - self.ref_w

    @property
    def sigma_ref(self) -> float:
        return self.model_r - self.ref_r


@dataclass(frozen=True)
class LossBreakdown:
    quad: ErrorQuad
    sign: int
    inside_term: float
    loss: float
    scale: float


def compute_sign(quad: ErrorQuad, mode: SsrMode = SsrMode.SIGN) -> int:
    """+1 when the current model beats the reference on the winner, else -1.

    Ties count as -1. ``OFF`` always returns +1.
    """
    mode = SsrMode.parse(mode)
    if mode is SsrMode.OFF:
        return 1
    return 1 if quad.ref_w - quad.model_w > 0 else -1


def _rand_coef(sign, mode: SsrMode):
    if mode is SsrMode.OFF:
        return np.ones_like(sign, dtype=np.float64)
    if mode is SsrMode.INDICATOR:
        return (sign > 0).astype(np.float64)
    return np.asarray(sign, dtype=np.float64)


def inside_term(model_w, ref_w, model_r, ref_r, scale, rand_coef):
    """Logit of the preference loss; accepts traced ``model_*`` values."""
    gap_w = nx.sub(model_w, ref_w)
    gap_r = nx.sub(model_r, ref_r)
    return nx.mul(nx.sub(gap_w, nx.mul(rand_coef, gap_r)), -scale)


def _check_scale(scale):
    if not np.all(np.asarray(scale) > 0):
        raise NonPositiveScale(f"scale must be positive, got {scale}")


def ssr_loss(quad: ErrorQuad, scale: float, mode: SsrMode = SsrMode.SIGN) -> LossBreakdown:
    _check_scale(scale)
    mode = SsrMode.parse(mode)
    sign = compute_sign(quad, mode)
    coef = float(_rand_coef(np.array(sign), mode))
    z = float(inside_term(quad.model_w, quad.ref_w, quad.model_r, quad.ref_r, scale, coef))
    return LossBreakdown(quad, sign, z, -nx.log_sigmoid(z), float(scale))


def pseudocode_inside_term(quad: ErrorQuad, beta: float) -> float:
    """Inside term built the way the reference training loop writes it.

    There the sign is taken on ``model_w - ref_w`` and the replayed terms are
    *added*; ``scale_term = -0.5 * beta``. For non-tied inputs this equals
    ``ssr_loss(quad, beta / 2).inside_term``.
    """
    sign_code = 1.0 if quad.model_w - quad.ref_w > 0 else -1.0
    model_diff = quad.model_w + sign_code * quad.model_r
    ref_diff = quad.ref_w + sign_code * quad.ref_r
    return -0.5 * beta * (model_diff - ref_diff)


def analytic_gradient_weight(quad: ErrorQuad, scale: float) -> float:
    """Logistic weight ``-2 * scale * sigmoid(scale * (sigma_w - sigma_ref))``."""
    _check_scale(scale)
    return -2.0 * scale * nx.sigmoid(scale * (quad.sigma_w - quad.sigma_ref))


def batch_diagnostics(items: Sequence[LossBreakdown]):
    """Return ``(ssr_rate, implicit_acc, mean_loss)`` for a batch."""
    if not items:
        raise EmptyBatch("no loss items")
    n = len(items)
    ssr_rate = sum(1 for b in items if b.sign == -1) / n
    implicit_acc = sum(1 for b in items if b.inside_term > 0) / n
    mean_loss = math.fsum(b.loss for b in items) / n
    return ssr_rate, implicit_acc, mean_loss


def loss_scale(schedule: NoiseSchedule, beta: float, t):
    """Multiplier on the error gaps: ``beta / 2`` with constant weights, else ``beta * T * w_t``."""
    if beta <= 0:
        raise NonPositiveScale(f"beta must be positive, got {beta}")
    if schedule.weighting_mode == "constant":
        return np.full(np.shape(t), beta / 2.0) if np.ndim(t) else beta / 2.0
    return beta * schedule.T * schedule.weight_w_t(t)


def _row_errors(policy: Policy, params, x, t, c, target):
    pred = mlp(policy.spec, params, features(policy.spec, x, t, c))
    return nx.mean(nx.square(nx.sub(pred, target)), axis=1)


def sspo_batch_loss(theta: Policy, ref: Policy, x0_w, x0_rand, c, t, eps_w, eps_ref,
                    schedule: NoiseSchedule, beta: float, mode: SsrMode = SsrMode.SIGN):
    """Batched preference loss; returns ``(breakdowns, mean_loss, grad)``.

    Rows are independent pairs. ``grad`` is the gradient of the batch-mean
    loss with respect to ``theta`` only; ``ref`` and the sign are constants.
    """
    mode = SsrMode.parse(mode)
    x0_w, x0_rand = np.atleast_2d(x0_w), np.atleast_2d(x0_rand)
    eps_w, eps_ref = np.atleast_2d(eps_w), np.atleast_2d(eps_ref)
    n = x0_w.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    c = np.broadcast_to(np.asarray(c), (n,))
    scale = loss_scale(schedule, beta, t)
    _check_scale(scale)

    xt_w = schedule.forward_diffuse(x0_w, t, eps_w)
    xt_r = schedule.forward_diffuse(x0_rand, t, eps_ref)
    ref_w = _row_errors(ref, ref.params, xt_w, t, c, eps_w)
    ref_r = _row_errors(ref, ref.params, xt_r, t, c, eps_ref)
    record = {}

    def objective(params: ParamVector):
        model_w = _row_errors(theta, params, xt_w, t, c, eps_w)
        model_r = _row_errors(theta, params, xt_r, t, c, eps_ref)
        mw, mr = model_w.value, model_r.value
        sign = np.ones(n) if mode is SsrMode.OFF else np.where(ref_w - mw > 0, 1.0, -1.0)
        z = inside_term(model_w, ref_w, model_r, ref_r, scale, _rand_coef(sign, mode))
        losses = nx.neg(nx.log_sigmoid(z))
        record.update(mw=mw, mr=mr, sign=sign, z=z.value, losses=losses.value)
        return nx.mean(losses)

    mean_loss, g = nx.value_and_grad(objective, theta.params)
    items = [
        LossBreakdown(ErrorQuad(float(record["mw"][i]), float(ref_w[i]),
                                float(record["mr"][i]), float(ref_r[i])),
                      int(record["sign"][i]), float(record["z"][i]),
                      float(record["losses"][i]), float(scale[i]))
        for i in range(n)
    ]
    return items, mean_loss, g


def sspo_pair_loss(theta: Policy, ref: Policy, x0_w, x0_rand, c, t, eps_w, eps_ref,
                   schedule: NoiseSchedule, beta: float, mode: SsrMode = SsrMode.SIGN):
    """Single-pair loss breakdown and its gradient with respect to ``theta``."""
    items, _, g = sspo_batch_loss(theta, ref, x0_w, x0_rand, [c], [t], eps_w, eps_ref,
                                  schedule, beta, mode)
    return items[0], g


def sft_batch_loss(theta: Policy, x0, c, t, eps, schedule: NoiseSchedule):
    """Weighted noise-regression loss on ``x0`` and its gradient."""
    x0, eps = np.atleast_2d(x0), np.atleast_2d(eps)
    n = x0.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    c = np.broadcast_to(np.asarray(c), (n,))
    w = np.asarray(schedule.weight_w_t(t), dtype=np.float64)
    xt = schedule.forward_diffuse(x0, t, eps)

    def objective(params):
        return nx.mean(nx.mul(_row_errors(theta, params, xt, t, c, eps), w))

    return nx.value_and_grad(objective, theta.params)
