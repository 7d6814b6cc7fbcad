import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayrntune.envs import episodic_return, make_spec
from bayrntune.policy import (
    ArchMismatchError,
    CheckpointMeta,
    CheckpointVersionError,
    CorruptCheckpointError,
    PolicyArch,
    PolicyParams,
    load_checkpoint,
    policy_act,
    policy_init,
    read_checkpoint,
    save_checkpoint,
)

ARCH = PolicyArch(4, 16, 1)


def test_parameter_count():
    assert ARCH.n_params == 4 * 16 + 16 + 16 * 1 + 1 == 97
    assert policy_init(ARCH, 0).theta.size == 97


def test_init_deterministic_and_bounded():
    a, b = policy_init(ARCH, 5), policy_init(ARCH, 5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, policy_init(ARCH, 6).theta)
    n1 = 4 * 16 + 16
    assert np.all(np.abs(a.theta[:n1]) <= 1 / math.sqrt(4))
    assert np.all(np.abs(a.theta[n1:]) <= 1 / math.sqrt(16))


def test_params_are_immutable_and_validated():
    p = policy_init(ARCH, 0)
    with pytest.raises(ValueError):
        p.theta[0] = 1.0
    with pytest.raises(ValueError):
        PolicyParams(ARCH, np.zeros(96))
    with pytest.raises(ValueError):
        PolicyParams(ARCH, np.full(97, np.nan))


def test_zero_weights_give_zero_action():
    p = PolicyParams(ARCH, np.zeros(97))
    assert policy_act(p, [1.0, -2.0, 3.0, 0.5]).tolist() == [0.0]


def test_hand_computed_forward_pass():
    arch = PolicyArch(2, 2, 1)
    # W1 = [[0.1, -0.2], [0.3, 0.4]], b1 = [0.05, -0.05], W2 = [[0.5, -0.6]], b2 = [0.1]
    theta = [0.1, -0.2, 0.3, 0.4, 0.05, -0.05, 0.5, -0.6, 0.1]
    obs = [1.0, 2.0]
    h1 = math.tanh(0.1 * 1 - 0.2 * 2 + 0.05)
    h2 = math.tanh(0.3 * 1 + 0.4 * 2 - 0.05)
    expected = math.tanh(0.5 * h1 - 0.6 * h2 + 0.1)
    assert policy_act(PolicyParams(arch, theta), obs)[0] == pytest.approx(expected, abs=1e-15)


def test_observation_dimension_checked():
    with pytest.raises(ValueError):
        policy_act(policy_init(ARCH, 0), [1.0, 2.0])


@given(st.integers(0, 10_000), st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_actions_strictly_bounded(seed, obs):
    p = PolicyParams(ARCH, np.random.default_rng(seed).normal(0, 3, 97))
    a = policy_act(p, obs)
    assert np.all(np.abs(a) <= 1)


def test_lipschitz_in_parameters(rng):
    p = policy_init(ARCH, 1)
    obs = rng.normal(size=(32, 4))
    for _ in range(10):
        d = rng.normal(size=97)
        d *= 1e-6 / np.linalg.norm(d)
        q = PolicyParams(ARCH, p.theta + d)
        diff = max(abs(policy_act(p, o)[0] - policy_act(q, o)[0]) for o in obs)
        assert diff <= 1e-3


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    p = PolicyParams(ARCH, rng.normal(size=97) * 1e3)
    meta = CheckpointMeta(7, 3, 512.25, (0.75, 1.0))
    path = save_checkpoint(p, tmp_path / "ckpt_7.bin", meta)
    q, m = read_checkpoint(path)
    assert q.arch == ARCH
    assert q.theta.tobytes() == p.theta.tobytes()
    assert m == meta


def test_checkpoint_round_trip_preserves_return(tmp_path):
    spec = make_spec("puck-slide-1d")
    p = policy_init(spec.arch(), 3)
    q = load_checkpoint(save_checkpoint(p, tmp_path / "c.bin"), spec.arch())
    phi = [0.8, 1.1]
    assert episodic_return(spec, p, phi, 9) == episodic_return(spec, q, phi, 9)


def test_checkpoint_error_paths(tmp_path):
    p = policy_init(ARCH, 0)
    path = save_checkpoint(p, tmp_path / "c.bin")
    data = path.read_bytes()

    (tmp_path / "trunc.bin").write_bytes(data[:-20])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "trunc.bin")

    flipped = bytearray(data)
    flipped[-30] ^= 0xFF
    (tmp_path / "flip.bin").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "flip.bin")

    bumped = bytearray(data)
    bumped[4] = 99
    (tmp_path / "ver.bin").write_bytes(bytes(bumped))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver.bin")

    with pytest.raises(ArchMismatchError):
        load_checkpoint(path, PolicyArch(2, 16, 1))
