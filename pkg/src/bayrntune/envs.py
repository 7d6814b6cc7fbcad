"""Desk-scale environments whose dynamics are set by a DR parameter vector.

All three environments run 200 steps of 0.02 s, integrate with semi-implicit
Euler, and are vectorized over a leading batch axis so that a whole ES
population (or a batch of evaluation episodes) steps together.

puck-slide-1d
    A puck starts at rest at the origin and must come to rest on a target at
    +2 m. The pusher (force up to 30 N either way) only reaches the first
    0.7 m; past that the puck slides under Coulomb friction, so the release
    velocity has to match the (unknown) friction and mass. The policy observes
    only the puck position, so a push profile tuned for one mass/friction pair
    overshoots or stalls on another. DR dims: ``friction`` [0.5, 1.25],
    ``mass`` [0.25, 2]; the real system is ``(0.75, 0.9)``. With a constant
    push the puck stops at ``push_end * F / (mass * friction * g)``; the reach
    is chosen so that the centre of the box needs close to full force while
    the real puck needs about two thirds of it.
    Reward per step: ``4 * exp(-|x - 2| / 0.25)``.
cartpole-dr
    Continuous-force cart-pole with viscous cart/pole friction, an action
    delay line and a random push on the cart. DR dims: ``friction``
    [0.8, 2], ``delay`` (integer steps) [0, 8], ``force_max`` [0, 1.25] N.
    Reward +1 per upright step; the episode ends when the pole passes 12
    degrees or the cart leaves +-2.4 m.
pendulum-dr
    Torque-limited pendulum starting near the bottom. DR dims: ``mass``
    [0.25, 2], ``damping`` [0, 0.5], ``force_max`` [0, 1.25] N m.
    Reward per step: ``-(angle^2 + 0.1 vel^2 + 0.001 action^2)`` with the
    angle measured from upright.

Random perturbations are piecewise constant: a new value, uniform in
``[-force_max, force_max]``, is drawn every ``FORCE_CHANGE_EVERY`` steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import truncnorm

from .params import Dim, DomainParamSpace, clamp_to_space
from .policy import PolicyArch, PolicyParams, act_batch

HORIZON = 200
DT = 0.02
FORCE_CHANGE_EVERY = 10
MAX_DELAY = 8
DR_MODES = ("point", "gaussian-band")


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    phi: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "noise_std", np.broadcast_to(np.asarray(self.noise_std, dtype=float), self.phi.shape).copy())


@dataclass(frozen=True)
class EnvSpec:
    id: str
    space: DomainParamSpace
    ground_truth: GroundTruth
    obs_dim: int
    act_dim: int = 1
    horizon: int = HORIZON
    dt: float = DT
    dr_mode: str = "gaussian-band"
    relative_std: float = 0.05

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0:
            raise EnvError("horizon must be >= 1 and dt > 0")
        if self.dr_mode not in DR_MODES:
            raise EnvError(f"unknown dr-mode {self.dr_mode!r}")
        if not 0.0 <= self.relative_std <= 0.5:
            raise EnvError("relative_std must lie in [0, 0.5]")
        if not self.space.contains(self.ground_truth.phi):
            raise EnvError(f"ground truth {self.ground_truth.phi} outside the DR space")

    def arch(self, hidden: int = 16) -> PolicyArch:
        return PolicyArch(self.obs_dim, hidden, self.act_dim)

    def with_ground_truth(self, phi=None, noise_std=None) -> "EnvSpec":
        gt = self.ground_truth
        return replace(self, ground_truth=GroundTruth(
            gt.phi if phi is None else phi, gt.noise_std if noise_std is None else noise_std))


@dataclass(frozen=True)
class EnvState:
    """Batched environment state. ``s`` has shape ``(B, n_state)``."""

    s: np.ndarray
    t: int
    phi: np.ndarray  # per-episode dynamics parameters, (B, d)
    action_buffer: np.ndarray  # (B, MAX_DELAY + 1, act_dim); slot k holds the action from k steps ago
    forces: np.ndarray  # pre-drawn perturbation schedule, (B, n_segments)
    done: np.ndarray  # (B,)

    @property
    def batch(self) -> int:
        return self.s.shape[0]


# --- dynamics -----------------------------------------------------------------


class PuckSlide:
    id = "puck-slide-1d"
    dims = (Dim("friction", 0.5, 1.25), Dim("mass", 0.25, 2.0))
    # a light puck: the real system sits below the centre of the mass range
    gt = (0.75, 0.9)
    gt_noise = (0.01, 0.01)
    obs_dim = 1
    target = 2.0
    push_end = 0.7
    force_max = 30.0
    base_mass = 1.0
    g = 9.81
    reward_scale = 4.0
    reward_width = 0.25

    def initial(self, n, rng):
        return np.zeros((n, 2))

    def observe(self, s):
        # position only: the policy cannot read speed back, so the push profile
        # has to be matched to the dynamics rather than corrected in the loop
        return ((s[:, 0] - self.target) / self.target)[:, None]

    def step(self, s, u, pert, phi, dt):
        x, v = s[:, 0], s[:, 1]
        mu, mass = phi[:, 0], phi[:, 1]
        push = np.where(x < self.push_end, self.force_max * u[:, 0], 0.0)
        v1 = v + dt * (push + pert) / (self.base_mass * mass)
        # kinetic friction decelerates toward rest and never reverses motion
        v_new = np.sign(v1) * np.maximum(np.abs(v1) - dt * mu * self.g, 0.0)
        return np.stack([x + dt * v_new, v_new], axis=1)

    def reward(self, s, a):
        return self.reward_scale * np.exp(-np.abs(s[:, 0] - self.target) / self.reward_width)

    def terminal(self, s):
        return np.zeros(len(s), dtype=bool)

    def force_max_of(self, phi):
        return np.zeros(len(phi))

    def delay_of(self, phi):
        return np.zeros(len(phi), dtype=int)


class CartPole:
    id = "cartpole-dr"
    dims = (Dim("friction", 0.8, 2.0), Dim("delay", 0.0, 8.0, True), Dim("force_max", 0.0, 1.25))
    gt = (1.4, 2.0, 0.6)
    gt_noise = (0.01, 0.0, 0.01)
    obs_dim = 4
    g = 9.8
    m_cart = 1.0
    m_pole = 0.1
    half_len = 0.5
    force_mag = 10.0
    cart_damping = 0.1
    pole_damping = 0.005
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def initial(self, n, rng):
        s = np.zeros((n, 4))
        s[:, 2] = rng.uniform(-0.05, 0.05, n)
        return s

    def observe(self, s):
        return s / np.array([2.4, 2.0, self.theta_limit, 2.0])

    def step(self, s, u, pert, phi, dt):
        x, xd, th, thd = s.T
        fm = phi[:, 0]
        total = self.m_cart + self.m_pole
        pml = self.m_pole * self.half_len
        force = self.force_mag * u[:, 0] + pert - self.cart_damping * fm * xd
        cos, sin = np.cos(th), np.sin(th)
        tmp = (force + pml * thd**2 * sin) / total
        thacc = (self.g * sin - cos * tmp - self.pole_damping * fm * thd / pml) / (
            self.half_len * (4.0 / 3.0 - self.m_pole * cos**2 / total))
        xacc = tmp - pml * thacc * cos / total
        xd = xd + dt * xacc
        thd = thd + dt * thacc
        return np.stack([x + dt * xd, xd, th + dt * thd, thd], axis=1)

    def terminal(self, s):
        return (np.abs(s[:, 0]) > self.x_limit) | (np.abs(s[:, 2]) > self.theta_limit)

    def reward(self, s, a):
        return np.where(self.terminal(s), 0.0, 1.0)

    def force_max_of(self, phi):
        return phi[:, 2]

    def delay_of(self, phi):
        return phi[:, 1].round().astype(int)


class Pendulum:
    id = "pendulum-dr"
    dims = (Dim("mass", 0.25, 2.0), Dim("damping", 0.0, 0.5), Dim("force_max", 0.0, 1.25))
    gt = (1.0, 0.1, 0.3)
    gt_noise = (0.01, 0.01, 0.01)
    obs_dim = 3
    g = 10.0
    length = 1.0
    torque_max = 2.0

    def initial(self, n, rng):
        s = np.empty((n, 2))
        s[:, 0] = math.pi
        s[:, 1] = rng.uniform(-0.1, 0.1, n)
        return s

    def observe(self, s):
        return np.stack([np.cos(s[:, 0]), np.sin(s[:, 0]), s[:, 1] / 8.0], axis=1)

    def step(self, s, u, pert, phi, dt):
        th, om = s[:, 0], s[:, 1]
        m, b = phi[:, 0], phi[:, 1]
        acc = (self.g / self.length) * np.sin(th) + (
            self.torque_max * u[:, 0] - b * om + pert) / (m * self.length**2)
        om = om + dt * acc
        return np.stack([th + dt * om, om], axis=1)

    def reward(self, s, a):
        ang = (s[:, 0] + math.pi) % (2 * math.pi) - math.pi
        return -(ang**2 + 0.1 * s[:, 1] ** 2 + 0.001 * a[:, 0] ** 2)

    def terminal(self, s):
        return np.zeros(len(s), dtype=bool)

    def force_max_of(self, phi):
        return phi[:, 2]

    def delay_of(self, phi):
        return np.zeros(len(phi), dtype=int)

    def energy(self, s, mass=1.0):
        th, om = s[:, 0], s[:, 1]
        return 0.5 * mass * self.length**2 * om**2 + mass * self.g * self.length * np.cos(th)


DYNAMICS = {d.id: d() for d in (PuckSlide, CartPole, Pendulum)}


def make_spec(env_id: str, **overrides) -> EnvSpec:
    try:
        dyn = DYNAMICS[env_id]
    except KeyError:
        raise EnvError(f"unknown environment {env_id!r}; known: {sorted(DYNAMICS)}") from None
    spec = EnvSpec(
        id=env_id,
        space=DomainParamSpace(dyn.dims),
        ground_truth=GroundTruth(dyn.gt, dyn.gt_noise),
        obs_dim=dyn.obs_dim,
    )
    return replace(spec, **overrides) if overrides else spec


def make_env_suite() -> list[EnvSpec]:
    return [make_spec(k) for k in DYNAMICS]


# --- episode parameter sampling -------------------------------------------------


def truncated_normal(center, std, space: DomainParamSpace, n: int, rng) -> np.ndarray:
    """``n`` draws per dimension from N(center, std) truncated to the box, integer dims rounded."""
    center = np.asarray(center, dtype=float)
    std = np.broadcast_to(np.asarray(std, dtype=float), center.shape)
    out = np.tile(center, (n, 1))
    for k in range(space.ndim):
        if std[k] > 0:
            a = (space.lo[k] - center[k]) / std[k]
            b = (space.hi[k] - center[k]) / std[k]
            out[:, k] = truncnorm.rvs(a, b, loc=center[k], scale=std[k], size=n, random_state=rng)
    return clamp_to_space(out, space)


def sample_episode_params(spec: EnvSpec, phi, n: int, rng, dr_mode: str | None = None) -> np.ndarray:
    """Per-episode dynamics parameters around a proposed ``phi``.

    ``point`` uses ``phi`` as is; ``gaussian-band`` draws from a normal centered
    at ``phi`` with std ``relative_std * (hi - lo)``, truncated to the box.
    """
    mode = dr_mode or spec.dr_mode
    phi = np.asarray(phi, dtype=float)
    if mode == "point":
        return np.tile(phi, (n, 1))
    if mode == "gaussian-band":
        return truncated_normal(phi, spec.relative_std * (spec.space.hi - spec.space.lo), spec.space, n, rng)
    raise EnvError(f"unknown dr-mode {mode!r}")


def sample_ground_truth(spec: EnvSpec, n: int, rng) -> np.ndarray:
    gt = spec.ground_truth
    return truncated_normal(gt.phi, gt.noise_std, spec.space, n, rng)


# --- stepping -------------------------------------------------------------------


def reset_batch(spec: EnvSpec, phis, rng) -> EnvState:
    """Initial states for a batch whose per-episode parameters are already drawn."""
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    for phi in phis:
        if not spec.space.contains(phi):
            raise EnvError(f"phi {phi} outside the DR space of {spec.id}")
    rng = np.random.default_rng(rng)
    dyn = DYNAMICS[spec.id]
    n = len(phis)
    s = dyn.initial(n, rng)
    n_seg = spec.horizon // FORCE_CHANGE_EVERY + 1
    fmax = dyn.force_max_of(phis)
    forces = rng.uniform(-1.0, 1.0, (n, n_seg)) * fmax[:, None]
    buf = np.zeros((n, MAX_DELAY + 1, spec.act_dim))
    return EnvState(s, 0, phis, buf, forces, np.zeros(n, dtype=bool))


def env_reset(spec: EnvSpec, phi, seed, dr_mode: str | None = None) -> EnvState:
    """Single-episode reset; the episode's dynamics are drawn from ``phi`` per dr-mode."""
    phi = np.asarray(phi, dtype=float)
    if not spec.space.contains(phi):
        raise EnvError(f"phi {phi} outside the DR space of {spec.id}")
    rng = np.random.default_rng(seed)
    episode_phi = sample_episode_params(spec, phi, 1, rng, dr_mode)
    return reset_batch(spec, episode_phi, rng)


def step_batch(spec: EnvSpec, state: EnvState, actions: np.ndarray):
    """Advance every episode one step. Returns ``(state, rewards, done)``.

    Episodes already done keep their state and receive zero reward.
    """
    if state.t >= spec.horizon:
        raise EnvError("episode already at its horizon")
    actions = np.asarray(actions, dtype=float).reshape(state.batch, spec.act_dim)
    if not np.all(np.isfinite(actions)):
        raise EnvError("non-finite action")
    actions = np.clip(actions, -1.0, 1.0)
    dyn = DYNAMICS[spec.id]
    buf = np.concatenate([actions[:, None, :], state.action_buffer[:, :-1, :]], axis=1)
    delay = dyn.delay_of(state.phi)
    applied = buf[np.arange(state.batch), delay]
    pert = state.forces[:, state.t // FORCE_CHANGE_EVERY]
    s_new = dyn.step(state.s, applied, pert, state.phi, spec.dt)
    live = ~state.done
    s_new = np.where(live[:, None], s_new, state.s)
    rewards = np.where(live, dyn.reward(s_new, actions), 0.0)
    done = state.done | dyn.terminal(s_new)
    t = state.t + 1
    if t >= spec.horizon:
        done = np.ones_like(done)
    return EnvState(s_new, t, state.phi, buf, state.forces, done), rewards, done


def env_step(spec: EnvSpec, state: EnvState, action):
    """Single-episode step; scalar reward and done flag when the batch has one episode."""
    new, r, done = step_batch(spec, state, action)
    if state.batch == 1:
        return new, float(r[0]), bool(done[0])
    return new, r, done


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    return DYNAMICS[spec.id].observe(state.s)


def tile_state(state: EnvState, reps: int) -> EnvState:
    """Repeat a batched state ``reps`` times along the batch axis."""
    return EnvState(
        np.tile(state.s, (reps, 1)), state.t, np.tile(state.phi, (reps, 1)),
        np.tile(state.action_buffer, (reps, 1, 1)), np.tile(state.forces, (reps, 1)),
        np.tile(state.done, reps),
    )


def run_episodes(spec: EnvSpec, arch: PolicyArch, thetas, state: EnvState):
    """Play policies ``thetas`` (one row per episode) from ``state`` to the horizon.

    Returns ``(returns, lengths)`` where lengths count the simulated steps of
    each episode up to and including its terminal step.
    """
    thetas = np.atleast_2d(thetas)
    if len(thetas) != state.batch:
        thetas = np.broadcast_to(thetas, (state.batch, thetas.shape[1]))
    dyn = DYNAMICS[spec.id]
    total = np.zeros(state.batch)
    lengths = np.zeros(state.batch, dtype=np.int64)
    while state.t < spec.horizon and not state.done.all():
        live = ~state.done
        a = act_batch(arch, thetas, dyn.observe(state.s))
        state, r, _ = step_batch(spec, state, a)
        total += r
        lengths += live
    return total, lengths


def rollout(spec: EnvSpec, arch: PolicyArch, thetas, phis, rng):
    """Run one episode per row of ``phis``. Returns ``(returns, lengths)``."""
    return run_episodes(spec, arch, thetas, reset_batch(spec, phis, rng))


def episodic_return(spec: EnvSpec, params: PolicyParams, phi, seed, dr_mode: str | None = None) -> float:
    rng = np.random.default_rng(seed)
    phi = np.asarray(phi, dtype=float)
    if not spec.space.contains(phi):
        raise EnvError(f"phi {phi} outside the DR space of {spec.id}")
    episode_phi = sample_episode_params(spec, phi, 1, rng, dr_mode)
    ret, _ = rollout(spec, params.arch, params.theta[None, :], episode_phi, rng)
    return float(ret[0])


def real_eval(spec: EnvSpec, params: PolicyParams, n_episodes: int, seed, gt: GroundTruth | None = None) -> float:
    """Mean return under the hidden ground truth (per-episode truncated-normal draws around it)."""
    if n_episodes < 1:
        raise EnvError("n_episodes must be >= 1")
    if gt is not None:
        spec = replace(spec, ground_truth=gt)
    rng = np.random.default_rng(seed)
    phis = sample_ground_truth(spec, n_episodes, rng)
    ret, _ = rollout(spec, params.arch, params.theta[None, :], phis, rng)
    return float(np.mean(ret))
