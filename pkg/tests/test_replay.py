import numpy as np
import pytest
from scipy.stats import chisquare

from sspo.errors import EmptyStore, IndexGap
from sspo.numerics import SeededRng
from sspo.policy import Policy, PolicySpec
from sspo.replay import CheckpointStore, ErdStrategy

SPEC = PolicySpec(2, 3, (8,), 4)


def policy(i):
    p = Policy.initial(SPEC)
    return p.with_params(np.random.default_rng(i).normal(size=len(p.params)))


def filled(tmp_path, n, strategy=ErdStrategy.UNIFORM):
    store = CheckpointStore(tmp_path / "ckpt", strategy, SPEC)
    for k in range(n):
        store.append(policy(k), k)
    return store


def test_append_increments_length(tmp_path):
    store = CheckpointStore(tmp_path, spec=SPEC)
    store.append(policy(0), 0)
    assert len(store) == 1
    with pytest.raises(IndexGap):
        store.append(policy(1), 2)


def test_seven_checkpoints_have_contiguous_indices(tmp_path):
    store = filled(tmp_path, 7)
    assert store.indices == list(range(7))
    assert sorted(p.name for p in (tmp_path / "ckpt").glob("*.sspockpt")) == \
        sorted(f"{k}.sspockpt" for k in range(7))


def test_manifest_lines(tmp_path):
    store = filled(tmp_path, 3)
    lines = (tmp_path / "ckpt" / "manifest.txt").read_text().splitlines()
    assert [ln.split()[:2] for ln in lines] == [[str(k), f"{k}.sspockpt"] for k in range(3)]
    assert [int(ln.split()[2], 16) for ln in lines] == [e.crc for e in store.entries]
    reopened = CheckpointStore.open(tmp_path / "ckpt", spec=SPEC)
    assert reopened.entries == store.entries


@pytest.mark.parametrize("strategy", list(ErdStrategy))
def test_single_entry_always_zero(tmp_path, strategy):
    store = filled(tmp_path, 1, strategy)
    rng = SeededRng(0)
    assert {store.sample_index(rng) for _ in range(50)} == {0}


def test_constant_strategies(tmp_path):
    rng = SeededRng(0)
    last = filled(tmp_path / "a", 5, ErdStrategy.LAST)
    init = filled(tmp_path / "b", 5, ErdStrategy.INITIAL)
    assert {last.sample_index(rng) for _ in range(100)} == {4}
    assert {init.sample_index(rng) for _ in range(100)} == {0}


def test_empty_store(tmp_path):
    with pytest.raises(EmptyStore):
        CheckpointStore(tmp_path, spec=SPEC).sample_index(SeededRng(0))


def _frequencies(store, n, seed=0):
    rng = SeededRng(seed)
    draws = np.array([store.sample_index(rng) for _ in range(n)])
    return np.bincount(draws, minlength=len(store))


def test_uniform_frequencies_k4(tmp_path):
    counts = _frequencies(filled(tmp_path, 4), 100_000)
    freq = counts / counts.sum()
    assert np.all((freq >= 0.24) & (freq <= 0.26))


@pytest.mark.parametrize("k", [2, 5, 10])
def test_uniform_chi_square(tmp_path, k):
    counts = _frequencies(filled(tmp_path, k), 100_000, seed=k)
    assert chisquare(counts).pvalue > 0.01


def test_index_sequence_is_deterministic(tmp_path):
    store = filled(tmp_path, 6)
    a = [store.sample_index(SeededRng(3, (i,))) for i in range(200)]
    b = [store.sample_index(SeededRng(3, (i,))) for i in range(200)]
    assert a == b


def test_loaded_params_are_bit_exact(tmp_path):
    store = filled(tmp_path, 4)
    fresh = CheckpointStore.open(tmp_path / "ckpt", spec=SPEC)
    for k in range(4):
        assert fresh.load(k).params.values.tobytes() == policy(k).params.values.tobytes()
    idx, p = fresh.sample_checkpoint(SeededRng(1))
    assert p.params.values.tobytes() == policy(idx).params.values.tobytes()


def test_strategy_aliases():
    assert ErdStrategy.parse("0") is ErdStrategy.INITIAL
    assert ErdStrategy.parse("k-1") is ErdStrategy.LAST
    assert ErdStrategy.parse("uniform") is ErdStrategy.UNIFORM
    with pytest.raises(ValueError):
        ErdStrategy.parse("newest")
