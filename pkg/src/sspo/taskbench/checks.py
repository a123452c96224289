"""Oracle sweeps behind ``sspo check``: gradients, the bias identity, replay frequencies."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.stats import chisquare

from .. import numerics as nx
from ..alignment import (ErrorQuad, SsrMode, analytic_gradient_weight, compute_sign, inside_term,
                         loss_scale, sspo_pair_loss, ssr_loss)
from ..numerics import ParamVector, SeededRng
from ..policy import Policy, PolicySpec
from ..replay import CheckpointStore, ErdStrategy
from ..schedule import NoiseSchedule
from .theory import theorem2_bias_check

GRAD_TOL = 1e-4
WEIGHT_TOL = 1e-6
IDENTITY_TOL = 1e-12
CHI2_P = 0.01


@dataclass(frozen=True)
class GradCase:
    index: int
    mode: str
    sign: int
    rel_error: float
    weight_error: float


def _relative(a, b) -> float:
    """Max-norm error of ``a`` against ``b``, relative to the larger max-norm."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def _weight_error(quad, scale, mode) -> float:
    """Compare the analytic logistic weight with autodiff on the winner error.

    Only meaningful for the plain contrast (sign +1); other cases report 0.
    """
    if compute_sign(quad, mode) != 1:
        return 0.0
    pv = ParamVector.from_segments([("m", np.array([quad.model_w, quad.model_r]))])
    g = nx.grad(lambda p: nx.neg(nx.log_sigmoid(inside_term(
        p.segment("m")[0], quad.ref_w, p.segment("m")[1], quad.ref_r, scale, 1.0))), pv)
    return abs(-2.0 * g.values[0] - analytic_gradient_weight(quad, scale))


def _plain_pair_loss(theta, ref, x0_w, x0_rand, c, t, eps_w, eps_ref, schedule, beta, mode):
    """Pair loss from plain forward passes, with no gradient tape involved."""
    xt_w = schedule.forward_diffuse(x0_w, t, eps_w)
    xt_r = schedule.forward_diffuse(x0_rand, t, eps_ref)
    err = lambda p, x, e: float(np.mean((p.predict_eps(x, t, c) - e) ** 2))  # noqa: E731
    quad = ErrorQuad(err(theta, xt_w, eps_w), err(ref, xt_w, eps_w),
                     err(theta, xt_r, eps_ref), err(ref, xt_r, eps_ref))
    return ssr_loss(quad, loss_scale(schedule, beta, t), mode).loss


def gradcheck(n_cases: int = 20, seed: int = 0, spec: PolicySpec | None = None,
              schedule: NoiseSchedule | None = None, h: float = 1e-6) -> list[GradCase]:
    """Autodiff vs central differences of the pair loss over random policies and inputs."""
    spec = spec or PolicySpec(2, 3, (12, 12), 8)
    schedule = schedule or NoiseSchedule()
    modes = list(SsrMode)
    out = []
    for i in range(n_cases):
        rng = np.random.default_rng([seed, i])
        n = spec.n_params
        theta = Policy.initial(spec).with_params(rng.normal(0, 0.4, n))
        ref = Policy.initial(spec).with_params(rng.normal(0, 0.4, n))
        kw = dict(x0_w=rng.normal(size=2), x0_rand=rng.normal(size=2), c=int(rng.integers(3)),
                  t=int(rng.integers(1, schedule.T + 1)), eps_w=rng.normal(size=2),
                  eps_ref=rng.normal(size=2), schedule=schedule, beta=float(rng.uniform(0.5, 8.0)),
                  mode=modes[i % len(modes)])
        b, g = sspo_pair_loss(theta, ref, **kw)
        fd = nx.central_difference(
            lambda v: _plain_pair_loss(theta.with_params(v), ref, **kw), theta.params.values, h)
        out.append(GradCase(i, kw["mode"].value, b.sign, _relative(np.asarray(g.values), fd),
                            _weight_error(b.quad, b.scale, kw["mode"])))
    return out


@dataclass(frozen=True)
class BiasCase:
    alpha: float
    t: int
    sigma0_sq: float
    bias1: tuple
    bias2: tuple
    kl_1: float
    identity_error: float
    orderings_agree: bool


def theorem2_grid(seed: int = 0, alphas=(0.5, 0.9, 0.95, 0.99, 0.999), ts=(1, 2, 5, 10, 25, 50),
                  sigma0_sqs=(0.1, 1.0, 4.0), n_bias_pairs: int = 12) -> list[BiasCase]:
    """Sweep the closed-form KL against its from-means recomputation.

    The first bias pair is always ``(0, b)`` so the zero-bias row appears.
    """
    rng = np.random.default_rng(seed)
    pairs = [(np.zeros(2), rng.normal(0, 0.5, 2))]
    pairs += [(rng.normal(0, 0.5, 2), rng.normal(0, 0.5, 2)) for _ in range(n_bias_pairs - 1)]
    out = []
    for alpha in alphas:
        s = NoiseSchedule(alpha, max(ts))
        for t in ts:
            for sig in sigma0_sqs:
                for b1, b2 in pairs:
                    r = theorem2_bias_check(s, t, sig, b1, b2)
                    out.append(BiasCase(alpha, t, sig, tuple(b1), tuple(b2), r.kl_1,
                                        r.identity_error, r.orderings_agree))
    return out


@dataclass(frozen=True)
class ReplayCase:
    strategy: str
    k: int
    frequencies: tuple
    p_value: float
    passed: bool


def replay_stats(ks=(2, 4, 5, 10), n_draws: int = 100_000, seed: int = 0) -> list[ReplayCase]:
    """Index frequencies of each replay strategy over stores of size ``k``."""
    spec = PolicySpec(2, 1, (2,), 2)
    policy = Policy.initial(spec)
    out = []
    with tempfile.TemporaryDirectory(prefix="sspo-replay-") as tmp:
        for k in ks:
            for strategy in ErdStrategy:
                store = CheckpointStore(f"{tmp}/{strategy.value}{k}", strategy, spec)
                for i in range(k):
                    store.append(policy, i)
                rng = SeededRng(seed, (k,))
                draws = np.array([store.sample_index(rng) for _ in range(n_draws)])
                counts = np.bincount(draws, minlength=k)
                freq = tuple(counts / n_draws)
                if strategy is ErdStrategy.UNIFORM:
                    p = float(chisquare(counts).pvalue)
                    ok = p > CHI2_P
                else:
                    p = float("nan")
                    want = 0 if strategy is ErdStrategy.INITIAL else k - 1
                    ok = counts[want] == n_draws
                out.append(ReplayCase(strategy.value, k, freq, p, bool(ok)))
    return out
