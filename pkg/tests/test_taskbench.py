import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspo.config import TrainConfig
from sspo.errors import ConditionOutOfRange, EmptySet, TimestepOutOfRange
from sspo.numerics import SeededRng
from sspo.schedule import NoiseSchedule
from sspo.taskbench.studies import (ABLATION_VARIANTS, SUMMARY_COLUMNS, RunCache,
                                    run_ablation_suite, run_erd_study)
from sspo.taskbench.tasks import (Component, MixtureTask, draw_winning, energy_distance,
                                  evaluate, toy_task)
from sspo.taskbench.theory import bias_kl, gaussian_kl, theorem2_bias_check
from sspo.policy import Policy, PolicySpec

TASK = toy_task()


# -- tasks -------------------------------------------------------------------------

def test_toy_task_shape():
    assert TASK.cond_cardinality == 3
    for c in range(3):
        assert len(TASK.base_mixture[c]) == 2
        assert all(comp.std == 0.8 for comp in TASK.base_mixture[c])
        (target,) = TASK.target_mixture[c]
        assert target.std == 0.25


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureTask(1, ((Component((0, 0), 1.0, 0.6),),), ((Component((0, 0), 1.0, 1.0),),))
    with pytest.raises(ValueError):
        MixtureTask(1, ((Component((0, 0), 0.0, 1.0),),), ((Component((0, 0), 1.0, 1.0),),))


def test_degenerate_target_draws_sit_on_the_mean():
    std = 1e-9
    task = MixtureTask(1, ((Component((0.0, 0.0), 1.0, 1.0),),),
                       ((Component((1.5, -2.0), std, 1.0),),))
    xs = draw_winning(task, 0, SeededRng(0), 100)
    assert np.all(np.abs(xs - [1.5, -2.0]) <= 6 * std)


def test_draws_are_seeded():
    a = draw_winning(TASK, 1, SeededRng(4), 50)
    np.testing.assert_array_equal(a, draw_winning(TASK, 1, SeededRng(4), 50))


@pytest.mark.parametrize("c", range(3))
def test_draw_mean_within_three_standard_errors(c):
    n = 10_000
    xs = draw_winning(TASK, c, SeededRng(c), n)
    se = 0.25 / math.sqrt(n)
    assert np.all(np.abs(xs.mean(axis=0) - TASK.mean(c)) < 3 * se)


def test_bad_condition():
    with pytest.raises(ConditionOutOfRange):
        draw_winning(TASK, 3, SeededRng(0), 1)


# -- energy distance -------------------------------------------------------------------

def test_energy_distance_identical_sets():
    a = np.random.default_rng(0).normal(size=(300, 2))
    assert energy_distance(a, a) == 0.0


def test_energy_distance_point_masses():
    p, q = np.array([1.0, 2.0]), np.array([-2.0, 6.0])
    assert energy_distance(np.tile(p, (7, 1)), np.tile(q, (4, 1))) == pytest.approx(10.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40))
def test_energy_distance_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 2)), rng.normal(1.0, 2.0, size=(m, 2))
    assert energy_distance(a, b) == pytest.approx(energy_distance(b, a), rel=1e-12, abs=1e-12)
    assert energy_distance(a, b) >= 0


def test_energy_distance_against_monte_carlo_oracle():
    rng = np.random.default_rng(2024)
    a = rng.normal(size=(10_000, 2))
    b = rng.normal(size=(10_000, 2)) + [1.0, 0.0]
    # independent oracle: expectations over fresh independent pairs
    oracle_rng = np.random.default_rng(7)
    m = 2_000_000
    x, x2 = oracle_rng.normal(size=(m, 2)), oracle_rng.normal(size=(m, 2))
    y, y2 = oracle_rng.normal(size=(m, 2)) + [1, 0], oracle_rng.normal(size=(m, 2)) + [1, 0]
    norm = lambda d: np.sqrt((d ** 2).sum(axis=1)).mean()  # noqa: E731
    oracle = 2 * norm(x - y) - norm(x - x2) - norm(y - y2)
    assert energy_distance(a, b) == pytest.approx(oracle, rel=0.02)


def test_energy_distance_empty():
    with pytest.raises(EmptySet):
        energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_evaluate_is_deterministic_and_non_negative():
    p = Policy.initial(PolicySpec(2, 3, (8,), 4))
    s = NoiseSchedule()
    r1 = evaluate(p, TASK, s, SeededRng(1), 64)
    r2 = evaluate(p, TASK, s, SeededRng(1), 64)
    assert r1 == r2
    assert r1.energy_distance == pytest.approx(np.mean(r1.per_condition))
    assert r1.energy_distance >= 0 and r1.eps_mse >= 0 and r1.n_samples == 64


# -- closed-form bias check ----------------------------------------------------------------

S99 = NoiseSchedule(0.99, 50)


def test_zero_bias_gives_zero_kl():
    r = theorem2_bias_check(S99, 7, 1.0, np.zeros(2), np.array([0.1, 0.0]))
    assert r.kl_1 == 0.0 and r.kl_1_from_means == 0.0


def test_kl_arithmetic_oracle():
    oracle = (1 - 0.99 ** 5) / (2 * 0.99 ** 5) * 0.01
    assert bias_kl(S99, 5, 1.0, [0.1, 0.0]) == pytest.approx(oracle, rel=1e-14)


@settings(max_examples=100)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       st.integers(1, 50), st.floats(0.1, 5.0))
def test_kl_and_mse_orderings_agree(b1, b2, t, sigma0_sq):
    r = theorem2_bias_check(S99, t, sigma0_sq, b1, b2)
    assert r.orderings_agree
    assert r.identity_error < 1e-12
    if np.dot(b1, b1) < np.dot(b2, b2):
        assert r.kl_1 < r.kl_2


def test_gaussian_kl_reference_values():
    assert gaussian_kl([0, 0], np.eye(2), [0, 0], np.eye(2)) == 0.0
    # 1-D closed form: log(s2/s1) + (s1^2 + d^2) / (2 s2^2) - 1/2
    v = gaussian_kl([0.0], [[1.0]], [1.0], [[4.0]])
    assert v == pytest.approx(math.log(2.0) + 2.0 / 8.0 - 0.5, rel=1e-14)


def test_bias_check_timestep_range():
    with pytest.raises(TimestepOutOfRange):
        theorem2_bias_check(S99, 0, 1.0, [0.0], [0.1])


# -- studies -------------------------------------------------------------------------

TINY = TrainConfig(hidden_dims=(8,), time_embed_dim=4, pretrain_steps=3, pretrain_batch_size=8,
                   K=1, updates_per_checkpoint=1, batch_size=4, eval_samples=16, T=10)


def test_erd_study_structure(tmp_path):
    cache = RunCache(TINY)
    report = run_erd_study(TINY, [0], tmp_path, cache)
    runs = sorted(p.parent.parent.name for p in tmp_path.glob("*/seed0/metrics.csv"))
    assert runs == ["erd_init", "erd_last", "erd_uniform"]
    lengths = {len(report.result(v, 0).rows) for v in report.variants}
    assert lengths == {1}
    assert len(cache.theta0) == 1
    header = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert header == ",".join(SUMMARY_COLUMNS)


def test_ablation_rows_per_seed(tmp_path):
    report = run_ablation_suite(TINY, [0, 1], tmp_path)
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * len(ABLATION_VARIANTS) == 11
    wo = [ln for ln in lines if ln.startswith("wo_ssr,")]
    assert all(ln.endswith(",,") for ln in wo)     # no SSR rate without the sign switch
    assert not report.failures


def test_failed_cell_is_marked(tmp_path, monkeypatch):
    from sspo import trainer

    real = trainer.sspo_train

    def flaky(cfg, theta0, run_dir=None, **kw):
        if cfg.erd_strategy.value == "last":
            raise RuntimeError("boom")
        return real(cfg, theta0, run_dir, **kw)

    monkeypatch.setattr(trainer, "sspo_train", flaky)
    report = run_erd_study(TINY, [0], tmp_path)
    assert ("erd_last", 0) in report.failures
    assert "erd_last,0,failed" in (tmp_path / "summary.csv").read_text()


def test_study_rerun_is_byte_identical(tmp_path):
    run_erd_study(TINY, [3], tmp_path / "a")
    run_erd_study(TINY, [3], tmp_path / "b")
    assert (tmp_path / "a/summary.csv").read_bytes() == (tmp_path / "b/summary.csv").read_bytes()
