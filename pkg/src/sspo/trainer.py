"""Pretraining, checkpoint-replay preference alignment, and the SFT baseline.

Random streams are children of ``SeededRng(cfg.seed)`` keyed by purpose, so
each run is a pure function of ``(seed, config)``:

    (0,)          policy initialisation
    (1, step)     pretraining batch ``step``
    (2, step)     alignment / SFT batch ``step``
    (3,)          evaluation (same stream at every evaluation)
    (4,)          held-out pretraining loss
"""

from __future__ import annotations

import csv
import io
import logging
import math
import tempfile
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import SsrMode, batch_diagnostics, sft_batch_loss, sspo_batch_loss
from .config import TrainConfig, dump_config
from .errors import DivergedLoss
from .numerics import SeededRng
from .policy import Policy, ancestral_sample_batch, save_params
from .replay import CheckpointStore
from .taskbench.tasks import (EvalReport, MixtureTask, draw_base_batch, draw_winning_batch,
                              evaluate, heldout_eps_mse, task_from_params)

log = logging.getLogger(__name__)

KEY_INIT, KEY_PRETRAIN, KEY_ALIGN, KEY_EVAL, KEY_HELDOUT = range(5)
METRIC_COLUMNS = ("step", "k", "sampled_ckpt", "loss", "ssr_rate", "implicit_acc",
                  "eval_score", "grad_norm")


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.buf = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            self.buf = grad.copy() if self.buf is None else self.momentum * self.buf + grad
            grad = self.buf
        return params - self.lr * grad


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params)


def make_optimizer(cfg: TrainConfig, lr: float):
    if cfg.optimizer == "sgd":
        return SGD(lr, cfg.momentum)
    return AdamW(lr, cfg.momentum, cfg.beta2, cfg.eps, cfg.weight_decay)


def _check_finite(value, step, what):
    if not math.isfinite(value):
        raise DivergedLoss(f"{what} became non-finite at step {step}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(col)) for col in METRIC_COLUMNS])
    return buf.getvalue()


@dataclass
class RunResult:
    """Metrics of one alignment or SFT run; scores are energy distances (lower is better)."""

    method: str
    policy: Policy
    rows: list
    initial_score: float
    evals: list = field(default_factory=list)     # (step, EvalReport)
    checkpoints: int = 0

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.energy_distance for _, r in self.evals])

    @property
    def final_score(self) -> float:
        return float(self.scores[-1]) if self.evals else self.initial_score

    @property
    def peak_score(self) -> float:
        return float(self.scores.min()) if self.evals else self.initial_score

    @property
    def drop(self) -> float:
        """How far the final score fell back from the best one."""
        return self.final_score - self.peak_score

    def ssr_rates(self) -> np.ndarray:
        return np.array([r["ssr_rate"] for r in self.rows if r.get("ssr_rate") is not None])

    def ssr_rate_window(self, first: bool, frac: float = 0.1) -> float | None:
        rates = self.ssr_rates()
        if rates.size == 0:
            return None
        n = max(1, int(round(frac * rates.size)))
        return float(rates[:n].mean() if first else rates[-n:].mean())


def _task(cfg: TrainConfig, task: MixtureTask | None) -> MixtureTask:
    return task if task is not None else task_from_params(cfg.task)


def pretrain(cfg: TrainConfig, task: MixtureTask | None = None):
    """Fit the noise predictor on the base mixture; returns ``(theta_0, losses)``."""
    task = _task(cfg, task)
    schedule = cfg.schedule
    root = SeededRng(cfg.seed)
    policy = Policy.initial(cfg.policy_spec, root.child(KEY_INIT))
    opt = make_optimizer(cfg, cfg.pretrain_lr)
    params = np.array(policy.params.values)
    losses = []
    B = cfg.pretrain_batch_size
    for step in range(1, cfg.pretrain_steps + 1):
        rng = root.child(KEY_PRETRAIN, step)
        conds = rng.integers(task.cond_cardinality, B)
        x0 = draw_base_batch(task, conds, rng)
        t = schedule.sample_t(rng, B)
        eps = rng.normal((B, 2))
        loss, g = sft_batch_loss(policy, x0, conds, t, eps, schedule)
        _check_finite(loss, step, "pretraining loss")
        losses.append(loss)
        params = opt.step(params, np.asarray(g.values))
        policy = policy.with_params(params)
    if losses:
        tail = float(np.mean(losses[-50:]))
        if tail >= cfg.pretrain_loss_threshold:
            log.warning("pretraining ended with loss %.4f above threshold %.4f",
                        tail, cfg.pretrain_loss_threshold)
    return policy, losses


def pretrain_heldout_loss(policy: Policy, cfg: TrainConfig, task: MixtureTask | None = None,
                          n: int = 8192) -> float:
    task = _task(cfg, task)
    rng = SeededRng(cfg.seed).child(KEY_HELDOUT)
    return heldout_eps_mse(policy, task.base_mixture, cfg.schedule, rng, n)


def _eval(policy, cfg, task) -> EvalReport:
    return evaluate(policy, task, cfg.schedule, SeededRng(cfg.seed).child(KEY_EVAL), cfg.eval_samples)


def _write_run(run_dir, cfg, rows):
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(dump_config(cfg), encoding="utf-8")
    (run_dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")


def _fresh_ckpt_dir(run_dir, stack: ExitStack) -> Path:
    if run_dir is None:
        return Path(stack.enter_context(tempfile.TemporaryDirectory(prefix="sspo-"))) / "ckpt"
    ckpt = Path(run_dir) / "ckpt"
    if ckpt.exists():
        for f in ckpt.iterdir():
            if f.suffix == ".sspockpt" or f.name == "manifest.txt":
                f.unlink()
    return ckpt


def sspo_train(cfg: TrainConfig, theta0: Policy, run_dir=None, task: MixtureTask | None = None,
               evaluate_initial: bool = True) -> RunResult:
    """Align ``theta0`` with checkpoint replay for ``K * updates_per_checkpoint`` updates."""
    task = _task(cfg, task)
    schedule = cfg.schedule
    root = SeededRng(cfg.seed)
    cadence, B = cfg.updates_per_checkpoint, cfg.batch_size
    opt = make_optimizer(cfg, cfg.lr)
    policy = theta0
    params = np.array(theta0.params.values)
    rows, evals = [], []
    initial = _eval(theta0, cfg, task).energy_distance if evaluate_initial else float("nan")

    with ExitStack() as stack:
        store = CheckpointStore(_fresh_ckpt_dir(run_dir, stack), cfg.erd_strategy, theta0.spec)
        store.append(theta0, 0, seed=cfg.seed)
        ref_idx = ref = None
        for step in range(1, cfg.total_updates + 1):
            k = (step - 1) // cadence + 1
            rng = root.child(KEY_ALIGN, step)
            if cfg.replay_per == "update" or (step - 1) % cadence == 0:
                ref_idx, ref = store.sample_checkpoint(rng)
            conds = rng.integers(task.cond_cardinality, B)
            x0_w = draw_winning_batch(task, conds, rng)
            x0_rand = ancestral_sample_batch(ref, conds, rng.child(0), schedule)
            t = schedule.sample_t(rng, B)
            eps_w = rng.normal((B, 2))
            eps_ref = rng.normal((B, 2))
            items, loss, g = sspo_batch_loss(policy, ref, x0_w, x0_rand, conds, t, eps_w, eps_ref,
                                             schedule, cfg.beta, cfg.ssr_mode)
            _check_finite(loss, step, "alignment loss")
            gvec = np.asarray(g.values)
            params = opt.step(params, gvec)
            policy = policy.with_params(params)
            ssr_rate, acc, _ = batch_diagnostics(items)
            row = {"step": step, "k": k, "sampled_ckpt": ref_idx, "loss": loss,
                   "ssr_rate": None if cfg.ssr_mode is SsrMode.OFF else ssr_rate,
                   "implicit_acc": acc, "eval_score": None,
                   "grad_norm": float(np.linalg.norm(gvec))}
            if step % cadence == 0:
                store.append(policy, step // cadence, seed=cfg.seed)
            if step % cfg.eval_cadence == 0 or step == cfg.total_updates:
                report = _eval(policy, cfg, task)
                evals.append((step, report))
                row["eval_score"] = report.energy_distance
            rows.append(row)
        n_ckpt = len(store)
    _write_run(run_dir, cfg, rows)
    return RunResult("sspo", policy, rows, initial, evals, n_ckpt)


def sft_train(cfg: TrainConfig, theta0: Policy, run_dir=None, task: MixtureTask | None = None,
              evaluate_initial: bool = True, steps: int | None = None) -> RunResult:
    """Plain noise regression on winning samples.

    ``steps`` defaults to the alignment budget ``K * updates_per_checkpoint``.
    """
    task = _task(cfg, task)
    schedule = cfg.schedule
    root = SeededRng(cfg.seed)
    B = cfg.batch_size
    opt = make_optimizer(cfg, cfg.lr)
    policy = theta0
    params = np.array(theta0.params.values)
    rows, evals = [], []
    initial = _eval(theta0, cfg, task).energy_distance if evaluate_initial else float("nan")
    steps = cfg.total_updates if steps is None else steps
    for step in range(1, steps + 1):
        rng = root.child(KEY_ALIGN, step)
        conds = rng.integers(task.cond_cardinality, B)
        x0_w = draw_winning_batch(task, conds, rng)
        t = schedule.sample_t(rng, B)
        eps_w = rng.normal((B, 2))
        loss, g = sft_batch_loss(policy, x0_w, conds, t, eps_w, schedule)
        _check_finite(loss, step, "SFT loss")
        gvec = np.asarray(g.values)
        params = opt.step(params, gvec)
        policy = policy.with_params(params)
        row = {"step": step, "k": (step - 1) // cfg.updates_per_checkpoint + 1, "loss": loss,
               "grad_norm": float(np.linalg.norm(gvec))}
        if step % cfg.eval_cadence == 0 or step == steps:
            report = _eval(policy, cfg, task)
            evals.append((step, report))
            row["eval_score"] = report.energy_distance
        rows.append(row)
    _write_run(run_dir, cfg, rows)
    return RunResult("sft", policy, rows, initial, evals)


def save_final(result: RunResult, run_dir, cfg: TrainConfig) -> Path:
    path = Path(run_dir) / "final.sspockpt"
    save_params(result.policy, path, iteration=cfg.K, seed=cfg.seed)
    return path
