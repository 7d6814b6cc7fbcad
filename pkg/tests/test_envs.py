import math

import numpy as np
import pytest

from bayrntune.envs import (
    DT,
    DYNAMICS,
    HORIZON,
    EnvError,
    EnvState,
    GroundTruth,
    env_reset,
    env_step,
    episodic_return,
    make_env_suite,
    make_spec,
    real_eval,
    reset_batch,
    rollout,
    sample_episode_params,
    sample_ground_truth,
    step_batch,
)
from bayrntune.policy import PolicyParams, policy_init

PUCK = make_spec("puck-slide-1d")
CART = make_spec("cartpole-dr")
PEND = make_spec("pendulum-dr")


def with_state(state, s):
    return EnvState(np.atleast_2d(np.asarray(s, dtype=float)), state.t, state.phi,
                    state.action_buffer, state.forces, state.done)


def zero_policy(spec):
    return PolicyParams(spec.arch(), np.zeros(spec.arch().n_params))


class OpenLoop:
    """Fixed action sequence, for physics checks that bypass the policy."""

    def __init__(self, actions):
        self.actions = actions

    def run(self, spec, phi, seed=0):
        state = reset_batch(spec, [phi], seed)
        xs = []
        for t in range(spec.horizon):
            a = self.actions[t] if t < len(self.actions) else 0.0
            state, _, _ = step_batch(spec, state, [[a]])
            xs.append(state.s[0].copy())
        return np.array(xs)


def test_suite_registry():
    suite = make_env_suite()
    assert len(suite) == 3
    assert {s.id for s in suite} == {"puck-slide-1d", "cartpole-dr", "pendulum-dr"}
    for spec in suite:
        assert spec.space.contains(spec.ground_truth.phi)
        assert spec.horizon == 200 and spec.dt == 0.02
    assert (PUCK.space.dims[0].lo, PUCK.space.dims[0].hi) == (0.5, 1.25)
    assert PUCK.space.dims[0].name == "friction"
    assert (PUCK.space.dims[1].lo, PUCK.space.dims[1].hi) == (0.25, 2.0)
    cart = {d.name: d for d in CART.space.dims}
    assert (cart["friction"].lo, cart["friction"].hi) == (0.8, 2.0)
    assert (cart["delay"].lo, cart["delay"].hi, cart["delay"].integer) == (0.0, 8.0, True)
    assert (cart["force_max"].lo, cart["force_max"].hi) == (0.0, 1.25)
    assert PUCK.ground_truth.phi[0] == 0.75
    assert PUCK.ground_truth.noise_std[0] == 0.01


def test_spec_validation():
    with pytest.raises(EnvError):
        make_spec("hopper")
    with pytest.raises(EnvError):
        make_spec("puck-slide-1d", relative_std=0.7)
    with pytest.raises(EnvError):
        make_spec("puck-slide-1d", dr_mode="wide")
    with pytest.raises(EnvError):
        PUCK.with_ground_truth([2.0, 1.0])


def test_puck_reset_is_fixed():
    s = env_reset(PUCK, [0.9, 1.3], 4)
    assert s.s.tolist() == [[0.0, 0.0]] and s.t == 0
    assert DYNAMICS["puck-slide-1d"].target == 2.0


def test_cartpole_reset_range_and_determinism():
    angles = [env_reset(CART, CART.ground_truth.phi, k).s[0, 2] for k in range(200)]
    assert max(abs(a) for a in angles) <= 0.05
    assert np.ptp(angles) > 0.05
    a, b = env_reset(CART, CART.ground_truth.phi, 3), env_reset(CART, CART.ground_truth.phi, 3)
    assert np.array_equal(a.s, b.s) and np.array_equal(a.forces, b.forces)


def test_reset_rejects_out_of_space_phi():
    with pytest.raises(EnvError):
        env_reset(PUCK, [2.0, 1.0], 0)


def test_puck_equilibrium():
    state = env_reset(PUCK, [0.75, 1.0], 0, dr_mode="point")
    for _ in range(20):
        state, r, done = env_step(PUCK, state, [0.0])
    assert state.s.tolist() == [[0.0, 0.0]]


def test_puck_single_step_hand_integration():
    # semi-implicit Euler with Coulomb friction, worked by hand:
    # v1 = v + dt*F/m, |v| shrinks by dt*mu*g without changing sign, then x += dt*v_new
    mu, mass, a = 0.6, 1.5, 0.7
    x0, v0 = 0.3, 1.2
    g, fmax = 9.81, DYNAMICS["puck-slide-1d"].force_max
    v1 = v0 + DT * (fmax * a) / mass
    v_new = v1 - DT * mu * g
    x_new = x0 + DT * v_new
    state = with_state(env_reset(PUCK, [mu, mass], 0, dr_mode="point"), [x0, v0])
    state, r, _ = env_step(PUCK, state, [a])
    assert abs(state.s[0, 0] - x_new) <= 1e-12
    assert abs(state.s[0, 1] - v_new) <= 1e-12
    assert r == pytest.approx(4.0 * math.exp(-abs(x_new - 2.0) / 0.25), abs=1e-12)


def test_puck_friction_never_reverses_motion():
    state = with_state(env_reset(PUCK, [1.25, 1.0], 0, dr_mode="point"), [1.8, 0.05])
    state, _, _ = env_step(PUCK, state, [0.0])
    assert state.s[0, 1] == 0.0


def test_puck_no_push_beyond_reach():
    state = with_state(env_reset(PUCK, [0.5, 1.0], 0, dr_mode="point"), [1.9, 0.0])
    state, _, _ = env_step(PUCK, state, [1.0])
    assert state.s[0].tolist() == [1.9, 0.0]


def test_puck_displacement_monotone_in_friction():
    push = OpenLoop([1.0] * 8)
    finals = [push.run(PUCK, [mu, 1.0])[-1, 0] for mu in np.linspace(0.5, 1.25, 10)]
    assert all(b <= a for a, b in zip(finals, finals[1:]))
    assert finals[0] > finals[-1]


def test_control_delay_zero_is_identity():
    phi0 = [1.2, 0.0, 0.0]
    rng = np.random.default_rng(0)
    acts = rng.uniform(-1, 1, 30)
    state = env_reset(CART, phi0, 5, dr_mode="point")
    ref = state.s[0].copy()
    dyn = DYNAMICS["cartpole-dr"]
    for a in acts:
        state, _, done = env_step(CART, state, [a])
        ref = dyn.step(ref[None, :], np.array([[a]]), np.zeros(1), np.array([phi0]), DT)[0]
        assert np.array_equal(state.s[0], ref)
        if done:
            break


def test_control_delay_shifts_actions():
    delayed = env_reset(CART, [1.2, 3.0, 0.0], 5, dr_mode="point")
    for _ in range(3):
        before = delayed.s.copy()
        delayed, _, _ = env_step(CART, delayed, [1.0])
    # with a 3-step delay the first three pushes have not reached the cart yet
    free = env_reset(CART, [1.2, 3.0, 0.0], 5, dr_mode="point")
    for _ in range(3):
        free, _, _ = env_step(CART, free, [0.0])
    assert np.array_equal(delayed.s, free.s)
    delayed, _, _ = env_step(CART, delayed, [0.0])
    free, _, _ = env_step(CART, free, [0.0])
    assert delayed.s[0, 1] > free.s[0, 1]


def test_perturbation_schedule_piecewise_constant():
    state = env_reset(CART, [1.0, 0.0, 1.25], 8, dr_mode="point")
    assert np.all(np.abs(state.forces) <= 1.25)
    assert np.ptp(state.forces) > 0
    zero = env_reset(CART, [1.0, 0.0, 0.0], 8, dr_mode="point")
    assert np.all(zero.forces == 0)


def test_step_errors():
    state = env_reset(PUCK, [0.75, 1.0], 0)
    with pytest.raises(EnvError):
        env_step(PUCK, state, [float("nan")])
    for _ in range(HORIZON):
        state, _, done = env_step(PUCK, state, [0.0])
    assert done
    with pytest.raises(EnvError):
        env_step(PUCK, state, [0.0])


def test_cartpole_terminates_and_counts_steps():
    p = PolicyParams(CART.arch(), np.r_[np.zeros(CART.arch().n_params - 1), 3.0])  # constant full push
    ret, lengths = rollout(CART, CART.arch(), p.theta, [[1.0, 0.0, 0.0]], 0)
    assert lengths[0] < HORIZON
    assert ret[0] == lengths[0] - 1  # the terminal step earns nothing


@pytest.mark.parametrize("seed", range(5))
def test_pendulum_energy_conservation(seed):
    dyn = DYNAMICS["pendulum-dr"]
    phi = [1.0, 0.0, 0.0]
    for init in (None, [math.pi - 0.5, 0.0]):
        state = env_reset(PEND, phi, seed, dr_mode="point")
        if init is not None:
            state = with_state(state, init)
        e0 = dyn.energy(state.s)[0]
        worst = 0.0
        for _ in range(PEND.horizon):
            state, _, _ = env_step(PEND, state, [0.0])
            worst = max(worst, abs(dyn.energy(state.s)[0] - e0) / abs(e0))
        assert worst < 0.01


def test_pendulum_resting_return_closed_form():
    state = with_state(env_reset(PEND, [1.0, 0.2, 0.0], 0, dr_mode="point"), [math.pi, 0.0])
    total = 0.0
    for _ in range(PEND.horizon):
        state, r, _ = env_step(PEND, state, [0.0])
        total += r
    assert total == pytest.approx(-PEND.horizon * math.pi**2, rel=1e-9)


def test_pendulum_init_distribution():
    vels = [env_reset(PEND, [1.0, 0.1, 0.0], k).s[0] for k in range(100)]
    assert all(v[0] == math.pi and abs(v[1]) <= 0.1 for v in vels)


def test_episodic_return_deterministic_and_finite():
    for spec in (PUCK, CART, PEND):
        p = policy_init(spec.arch(), 1)
        r1 = episodic_return(spec, p, spec.ground_truth.phi, 3)
        assert r1 == episodic_return(spec, p, spec.ground_truth.phi, 3)
        assert np.isfinite(r1)


def test_return_continuity_in_phi():
    p = policy_init(PUCK.arch(), 2)
    phi = np.array([0.8, 1.1])
    a = episodic_return(PUCK, p, phi, 0, dr_mode="point")
    b = episodic_return(PUCK, p, phi + 1e-6, 0, dr_mode="point")
    assert abs(a - b) < 1e-3


def test_dr_modes():
    rng = np.random.default_rng(0)
    phi = np.array([0.75, 1.0])
    assert np.array_equal(sample_episode_params(PUCK, phi, 5, rng, "point"), np.tile(phi, (5, 1)))
    band = sample_episode_params(PUCK, phi, 20_000, rng, "gaussian-band")
    assert np.all((band >= PUCK.space.lo) & (band <= PUCK.space.hi))
    width = PUCK.space.hi - PUCK.space.lo
    np.testing.assert_allclose(band.std(axis=0), 0.05 * width, rtol=0.05)
    edge = sample_episode_params(PUCK, [0.5, 0.25], 1000, rng, "gaussian-band")
    assert edge.min(axis=0).tolist() >= [0.5, 0.25]


def test_ground_truth_sampling():
    rng = np.random.default_rng(1)
    draws = sample_ground_truth(PUCK, 20_000, rng)
    assert abs(draws[:, 0].mean() - 0.75) < 1e-3
    assert abs(draws[:, 0].std() - 0.01) < 1e-3


def test_real_eval_reductions():
    p = policy_init(PUCK.arch(), 5)
    exact = PUCK.with_ground_truth(noise_std=[0.0, 0.0])
    gt = exact.ground_truth.phi
    single = episodic_return(PUCK, p, gt, 0, dr_mode="point")
    assert real_eval(exact, p, 4, 9) == pytest.approx(single, abs=1e-12)
    # one episode: the return at the sampled ground-truth draw
    rng = np.random.default_rng(3)
    phi = sample_ground_truth(PUCK, 1, rng)[0]
    assert real_eval(PUCK, p, 1, 3) == episodic_return(PUCK, p, phi, 0, dr_mode="point")
    with pytest.raises(EnvError):
        real_eval(PUCK, p, 0, 0)


def test_real_eval_default_puck_ground_truth_golden():
    p = policy_init(PUCK.arch(), 0)
    value = real_eval(PUCK, p, 8, 0)
    assert np.isfinite(value)
    assert value == pytest.approx(GOLDEN_PUCK_EVAL, rel=1e-9)


def test_ground_truth_override():
    gt = GroundTruth([0.9, 1.0], [0.0, 0.0])
    p = policy_init(PUCK.arch(), 0)
    assert real_eval(PUCK, p, 2, 0, gt=gt) == episodic_return(PUCK, p, [0.9, 1.0], 0, dr_mode="point")


GOLDEN_PUCK_EVAL = 0.268370102322009  # reference run, frozen
