"""Evolution-strategies policy optimizer with exact timestep accounting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import EnvSpec, reset_batch, rollout, run_episodes, sample_episode_params, tile_state
from .params import DomainParamSpace, uniform_sample
from .policy import PolicyArch, PolicyParams, policy_init

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EsConfig:
    population: int = 16
    noise_std: float = 0.05
    step_size: float = 0.02
    antithetic: bool = True
    rank_shaping: bool = True

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.antithetic and self.population % 2:
            raise ValueError("population must be even with antithetic sampling")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list = field(default_factory=list)  # (consumed steps, mean population return)
    consumed: int = 0
    generations: int = 0


def centered_ranks(f: np.ndarray) -> np.ndarray:
    """Map fitnesses to evenly spaced values in [-0.5, 0.5] by rank (ties share the mean rank)."""
    n = len(f)
    if n < 2:
        return np.zeros(n)
    order = np.argsort(f, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=float)
    # average tied ranks so identical fitnesses carry no signal
    uniq, inv = np.unique(f, return_inverse=True)
    if len(uniq) < n:
        ranks = np.bincount(inv, weights=ranks)[inv] / np.bincount(inv)[inv]
    return ranks / (n - 1) - 0.5


def sample_perturbations(dim: int, cfg: EsConfig, rng) -> np.ndarray:
    if cfg.antithetic:
        half = rng.standard_normal((cfg.population // 2, dim))
        return np.concatenate([half, -half])
    return rng.standard_normal((cfg.population, dim))


def es_gradient(eps: np.ndarray, fitness: np.ndarray, cfg: EsConfig) -> np.ndarray:
    w = centered_ranks(fitness) if cfg.rank_shaping else fitness - fitness.mean()
    return w @ eps / (len(fitness) * cfg.noise_std)


def es_generation(theta: np.ndarray, fitness_fn: Callable[[np.ndarray], np.ndarray], cfg: EsConfig, rng):
    """One ES update. ``fitness_fn`` maps a ``(population, dim)`` batch to returns.

    Returns the new parameter vector and the raw fitness values.
    """
    eps = sample_perturbations(theta.size, cfg, rng)
    f = np.asarray(fitness_fn(theta[None, :] + cfg.noise_std * eps), dtype=float)
    if not np.all(np.isfinite(f)):
        raise TrainingError(f"non-finite fitness in ES generation: {f}")
    return theta + _trust_region(cfg.step_size * es_gradient(eps, f, cfg), cfg.noise_std), f


TRUST_RADIUS = 2.0  # in units of the typical perturbation length noise_std * sqrt(dim)


def _trust_region(step: np.ndarray, noise_std: float) -> np.ndarray:
    # the sampled returns say nothing about theta beyond the perturbation radius,
    # so the step is capped there; the cap is inactive at the default settings
    cap = TRUST_RADIUS * noise_std * np.sqrt(step.size)
    norm = float(np.linalg.norm(step))
    return step * (cap / norm) if norm > cap else step


def es_optimize(theta0, fitness_fn, cfg: EsConfig, generations: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    for _ in range(generations):
        theta, _ = es_generation(theta, fitness_fn, cfg, rng)
    return theta


EpisodeSampler = Callable[[int, np.random.Generator], np.ndarray]


def pol_opt(
    params: PolicyParams,
    spec: EnvSpec,
    phi,
    budget: int,
    cfg: EsConfig,
    seed,
    episode_sampler: EpisodeSampler | None = None,
) -> TrainResult:
    """Fine-tune ``params`` with ES for ``budget`` environment steps.

    Each population member plays one episode whose dynamics come from
    ``episode_sampler`` (default: ``phi`` per the env's dr-mode); antithetic
    pairs share the episode parameters and initial-state seed. Generations
    run until the consumed step count reaches ``budget``, so the overshoot is
    below one generation.
    """
    one_gen = cfg.population * spec.horizon
    if budget < one_gen:
        raise TrainingError(f"budget {budget} is smaller than one generation ({one_gen} steps)")
    if episode_sampler is None:
        phi = np.asarray(phi, dtype=float)
        if not spec.space.contains(phi):
            raise TrainingError(f"phi {phi} outside the DR space")

        def episode_sampler(n, rng):
            return sample_episode_params(spec, phi, n, rng)

    rng = np.random.default_rng(seed)
    arch = params.arch
    theta = params.theta.copy()
    result = TrainResult(params)
    pairs = cfg.population // 2 if cfg.antithetic else cfg.population
    while result.consumed < budget:
        ep_phis = episode_sampler(pairs, rng)
        ep_seed = int(rng.integers(2**63))

        def fitness(thetas):
            ret, lengths = _paired_rollout(spec, arch, thetas, ep_phis, ep_seed, cfg.antithetic)
            result.consumed += int(lengths.sum())
            return ret

        theta, f = es_generation(theta, fitness, cfg, rng)
        result.generations += 1
        result.curve.append((result.consumed, float(np.mean(f))))
    if not np.all(np.isfinite(theta)):
        raise TrainingError("ES produced non-finite policy parameters")
    result.params = PolicyParams(arch, theta)
    return result


def _paired_rollout(spec, arch, thetas, phis, seed, antithetic):
    if not antithetic:
        return rollout(spec, arch, thetas, phis, seed)
    # antithetic partners start from identical initial states and perturbation schedules
    half = len(thetas) // 2
    return run_episodes(spec, arch, thetas, tile_state(reset_batch(spec, phis[:half], seed), 2))


def bootstrap_train(
    spec: EnvSpec,
    cfg: EsConfig,
    t_bootstrap: int,
    seed,
    hidden: int = 16,
    full_range: bool = False,
    t_tune: int | None = None,
) -> TrainResult:
    """Initial training from a random policy at the center of the DR box.

    With ``full_range`` the episodes draw dynamics uniformly over the whole box
    instead.
    """
    if t_tune is not None and t_bootstrap < t_tune:
        log.warning("T_bootstrap (%d) is smaller than T_tune (%d)", t_bootstrap, t_tune)
    rng = np.random.default_rng(seed)
    params = policy_init(spec.arch(hidden), rng)
    phi0 = spec.space.center()
    sampler = uniform_sampler(spec.space) if full_range else None
    return pol_opt(params, spec, phi0, t_bootstrap, cfg, rng, episode_sampler=sampler)


def uniform_sampler(space: DomainParamSpace) -> EpisodeSampler:
    def sample(n, rng):
        return uniform_sample(space, rng, n)

    return sample
