import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspo import numerics as nx
from sspo.alignment import sft_batch_loss
from sspo.errors import ChecksumMismatch, ConditionOutOfRange, FormatVersionMismatch, ShapeMismatch
from sspo.numerics import SeededRng
from sspo.policy import (Policy, PolicySpec, ancestral_sample, ancestral_sample_batch,
                         decode_checkpoint, encode_checkpoint, load_params, read_checkpoint,
                         save_params)
from sspo.schedule import NoiseSchedule
from sspo.trainer import AdamW

SPEC = PolicySpec(2, 3, (16, 16), 8)
SCHED = NoiseSchedule(0.9, 50)


def random_policy(seed, spec=SPEC, scale=0.3):
    rng = np.random.default_rng(seed)
    p = Policy.initial(spec)
    return p.with_params(rng.normal(0, scale, len(p.params)))


def test_zero_params_predict_zero():
    p = Policy.initial(SPEC)
    out = p.predict_eps(np.array([[3.0, -1.0], [0.2, 0.1]]), [5, 40], [0, 2])
    np.testing.assert_array_equal(out, np.zeros((2, 2)))


def test_fresh_policy_has_zero_output_layer():
    p = Policy.initial(SPEC, SeededRng(0))
    assert np.count_nonzero(p.params.segment("W0")) > 0
    assert not np.any(p.params.segment("W2"))
    np.testing.assert_array_equal(p.predict_eps(np.ones(2), 3, 1), np.zeros(2))


def test_prediction_is_deterministic_and_single_shaped():
    p = random_policy(1)
    a = p.predict_eps(np.array([0.5, -0.5]), 7, 1)
    b = p.predict_eps(np.array([0.5, -0.5]), 7, 1)
    assert a.shape == (2,)
    np.testing.assert_array_equal(a, b)


def test_input_validation():
    p = random_policy(1)
    with pytest.raises(ShapeMismatch):
        p.predict_eps(np.zeros(3), 1, 0)
    with pytest.raises(ConditionOutOfRange):
        p.predict_eps(np.zeros(2), 1, 3)


def test_overfit_one_point():
    policy = Policy.initial(SPEC, SeededRng(4))
    x0, eps = np.array([[1.0, -0.5]]), np.array([[0.3, -1.2]])
    t, c = np.array([10]), np.array([1])
    opt = AdamW(1e-2)
    params = np.array(policy.params.values)
    for _ in range(500):
        _, g = sft_batch_loss(policy, x0, c, t, eps, SCHED)
        params = opt.step(params, np.asarray(g.values))
        policy = policy.with_params(params)
    xt = SCHED.forward_diffuse(x0, t, eps)
    assert nx.mse(policy.predict_eps(xt, t, c), eps) < 1e-3


def test_gradient_through_predict_eps_matches_fd():
    p = random_policy(7)
    x = np.array([[0.4, -1.0], [1.5, 0.3]])
    w = np.array([[0.7, -0.2], [0.1, 0.9]])

    def loss(params):
        return nx.sum_(nx.mul(nx.tanh(p.predict_eps(x, [3, 30], [0, 2], params=params)), w))

    g = nx.grad(loss, p.params)
    fd = nx.central_difference(lambda v: float(loss(p.params.with_values(v))), p.params.values)
    rel = np.max(np.abs(g.values - fd) / np.maximum(1.0, np.abs(fd)))
    assert rel < 1e-5


def test_zero_predictor_samples_are_centred():
    p = Policy.initial(SPEC)
    n = 10_000
    xs = ancestral_sample_batch(p, np.zeros(n, dtype=int), SeededRng(3), SCHED)
    se = xs.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(xs.mean(axis=0)) < 3 * se)


def test_sampling_is_deterministic():
    p = random_policy(2)
    a = ancestral_sample(p, 1, SeededRng(5), SCHED)
    b = ancestral_sample(p, 1, SeededRng(5), SCHED)
    assert a.shape == (2,)
    np.testing.assert_array_equal(a, b)


def test_sampler_draw_count():
    rng = SeededRng(0)
    ancestral_sample(random_policy(0), 0, rng, SCHED)
    # x_T plus one draw for each of t = T..2; none at t = 1
    assert rng.n_normal == SCHED.T * 2


def test_sampler_on_point_mass():
    """Train on a point mass at (2, 2), then the sampler should land there."""
    target = np.array([2.0, 2.0])
    policy = Policy.initial(SPEC, SeededRng(1))
    opt = AdamW(3e-3)
    params = np.array(policy.params.values)
    B = 128
    for step in range(1500):
        rng = SeededRng(9, (step,))
        t = SCHED.sample_t(rng, B)
        eps = rng.normal((B, 2))
        _, g = sft_batch_loss(policy, np.tile(target, (B, 1)), np.zeros(B, dtype=int), t, eps, SCHED)
        params = opt.step(params, np.asarray(g.values))
        policy = policy.with_params(params)
    xs = ancestral_sample_batch(policy, np.zeros(1000, dtype=int), SeededRng(2), SCHED)
    assert np.linalg.norm(xs.mean(axis=0) - target) < 0.1


# -- checkpoints ---------------------------------------------------------------

def test_save_load_bit_exact(tmp_path):
    p = random_policy(3)
    crc = save_params(p, tmp_path / "a.sspockpt", iteration=4, seed=99)
    q, it, seed = read_checkpoint(tmp_path / "a.sspockpt", SPEC)
    assert (it, seed) == (4, 99)
    assert q.spec == p.spec
    assert q.params.values.tobytes() == p.params.values.tobytes()
    assert isinstance(crc, int)


def test_checkpoint_header_layout():
    p = random_policy(0)
    blob = encode_checkpoint(p, iteration=2, seed=5)
    assert blob[:8] == b"SSPOCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1
    header = 8 + 4 + 16 + 4 * len(SPEC.hidden_dims) + 20
    assert len(blob) == header + 8 * SPEC.n_params + 4


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "t.sspockpt"
    save_params(random_policy(0), path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ChecksumMismatch):
        load_params(path)


def test_flipped_byte_fails_crc():
    blob = bytearray(encode_checkpoint(random_policy(0)))
    blob[60] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        decode_checkpoint(bytes(blob))


def test_spec_mismatch_reports_both(tmp_path):
    path = tmp_path / "s.sspockpt"
    save_params(random_policy(0), path)
    other = PolicySpec(2, 3, (8,), 8)
    with pytest.raises(FormatVersionMismatch) as info:
        load_params(path, other)
    assert info.value.found == SPEC and info.value.expected == other


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.lists(st.integers(1, 9), min_size=1, max_size=3),
       st.sampled_from([2, 4, 6]), st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1))
def test_roundtrip_random_specs(d, n_cond, widths, emb, pseed, seed):
    spec = PolicySpec(d, n_cond, tuple(widths), emb)
    p = random_policy(pseed, spec, scale=10.0)
    q, _, s = decode_checkpoint(encode_checkpoint(p, 1, seed), spec)
    assert s == seed
    assert q.params.values.tobytes() == p.params.values.tobytes()
