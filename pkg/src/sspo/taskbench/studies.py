"""Multi-seed comparisons of replay strategies and loss variants.

Scores are energy distances to the target distribution, so *lower is
better*: ``peak_score`` is the minimum over evaluations and ``drop`` is
``final_score - peak_score``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import trainer as _trainer
from ..alignment import SsrMode
from ..config import TrainConfig, dump_config
from ..replay import ErdStrategy

log = logging.getLogger(__name__)

ERD_VARIANTS = {
    "erd_init": (ErdStrategy.INITIAL, SsrMode.SIGN),
    "erd_last": (ErdStrategy.LAST, SsrMode.SIGN),
    "erd_uniform": (ErdStrategy.UNIFORM, SsrMode.SIGN),
}

ABLATION_VARIANTS = {
    "sspo": (ErdStrategy.UNIFORM, SsrMode.SIGN),
    "wo_ssr": (ErdStrategy.UNIFORM, SsrMode.OFF),
    "indicator": (ErdStrategy.UNIFORM, SsrMode.INDICATOR),
    "erd_init": (ErdStrategy.INITIAL, SsrMode.SIGN),
    "erd_last": (ErdStrategy.LAST, SsrMode.SIGN),
}

SUMMARY_COLUMNS = ("variant", "seed", "peak_score", "final_score", "drop",
                   "ssr_rate_first10", "ssr_rate_last10")


class RunCache:
    """Shares pretrained models and finished runs between studies.

    Keys are ``(seed, erd_strategy, ssr_mode)`` for alignment runs, ``(seed, "sft")``
    for the baseline. The base config must be the same for every lookup.
    """

    def __init__(self, base: TrainConfig):
        self.base = base
        self.theta0 = {}
        self.runs = {}

    def cfg(self, seed, erd=None, ssr=None) -> TrainConfig:
        changes = {"seed": seed}
        if erd is not None:
            changes.update(erd_strategy=erd, ssr_mode=ssr)
        return self.base.replace(**changes)

    def initial_policy(self, seed):
        if seed not in self.theta0:
            self.theta0[seed], _ = _trainer.pretrain(self.cfg(seed))
        return self.theta0[seed]

    def sspo(self, seed, erd, ssr, run_dir=None):
        key = (seed, erd, ssr)
        if key not in self.runs:
            cfg = self.cfg(seed, erd, ssr)
            self.runs[key] = _trainer.sspo_train(cfg, self.initial_policy(seed), run_dir)
        elif run_dir is not None:
            _write_cached(self.runs[key], run_dir, self.cfg(seed, erd, ssr))
        return self.runs[key]

    def sft(self, seed, run_dir=None):
        key = (seed, "sft")
        if key not in self.runs:
            self.runs[key] = _trainer.sft_train(self.cfg(seed), self.initial_policy(seed), run_dir)
        elif run_dir is not None:
            _write_cached(self.runs[key], run_dir, self.cfg(seed))
        return self.runs[key]


def _write_cached(result, run_dir, cfg):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(dump_config(cfg), encoding="utf-8")
    (run_dir / "metrics.csv").write_text(_trainer.metrics_csv(result.rows), encoding="utf-8")


@dataclass
class StudyReport:
    variants: tuple
    seeds: tuple
    results: dict = field(default_factory=dict)    # (variant, seed) -> RunResult
    failures: dict = field(default_factory=dict)   # (variant, seed) -> message

    def result(self, variant, seed):
        return self.results.get((variant, seed))

    def column(self, variant, attr) -> np.ndarray:
        """Per-seed values of a RunResult attribute; NaN for failed cells."""
        out = []
        for seed in self.seeds:
            r = self.results.get((variant, seed))
            out.append(float(getattr(r, attr)) if r is not None else np.nan)
        return np.array(out)

    def score_step_variance(self, variant, seed) -> float:
        """Variance of the change in score between consecutive evaluations."""
        r = self.results.get((variant, seed))
        if r is None or len(r.scores) < 2:
            return float("nan")
        return float(np.var(np.diff(r.scores)))

    def summary_rows(self):
        rows = []
        for variant in self.variants:
            for seed in self.seeds:
                r = self.results.get((variant, seed))
                if r is None:
                    rows.append([variant, seed] + ["failed"] * 5)
                    continue
                first, last = r.ssr_rate_window(True), r.ssr_rate_window(False)
                rows.append([variant, seed, repr(r.peak_score), repr(r.final_score), repr(r.drop),
                             "" if first is None else repr(first),
                             "" if last is None else repr(last)])
        return rows

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(self.summary_rows())
        return buf.getvalue()


def _run_study(base, seeds, variants, study_dir, cache):
    if not seeds:
        raise ValueError("at least one seed is required")
    cache = cache or RunCache(base)
    report = StudyReport(tuple(variants), tuple(int(s) for s in seeds))
    for seed in report.seeds:
        for name, (erd, ssr) in variants.items():
            run_dir = None if study_dir is None else Path(study_dir) / name / f"seed{seed}"
            try:
                report.results[(name, seed)] = cache.sspo(seed, erd, ssr, run_dir)
            except Exception as exc:  # one failed cell must not sink the study
                log.error("variant %s seed %s failed: %s", name, seed, exc)
                report.failures[(name, seed)] = f"{type(exc).__name__}: {exc}"
    if study_dir is not None:
        Path(study_dir).mkdir(parents=True, exist_ok=True)
        (Path(study_dir) / "summary.csv").write_text(report.summary_csv(), encoding="utf-8")
    return report


def run_erd_study(base: TrainConfig, seeds, study_dir=None, cache: RunCache | None = None) -> StudyReport:
    """Initial vs last vs uniform checkpoint replay, all with the sign switch on."""
    return _run_study(base, seeds, ERD_VARIANTS, study_dir, cache)


def run_ablation_suite(base: TrainConfig, seeds, study_dir=None, cache: RunCache | None = None) -> StudyReport:
    """Full method against no-sign, indicator, initial-only and last-only replay."""
    return _run_study(base, seeds, ABLATION_VARIANTS, study_dir, cache)
