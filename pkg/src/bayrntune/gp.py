"""Gaussian-process surrogate and expected-improvement proposals over DR parameters.

Inputs are scaled to the unit box of the parameter space and targets are
standardized before fitting. Hyperparameters (ARD length-scales, signal and
noise variance) are picked by exhaustive log-marginal-likelihood search over
a small fixed grid, so fitting is deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm, qmc

from .params import DomainParamSpace, clamp_to_space

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.5, 1.0)
SIGNAL_VAR_GRID = (0.5, 1.0, 2.0)
NOISE_VAR_GRID = (1e-6, 1e-4, 1e-2)
JITTERS = (0.0,) + tuple(10.0 ** -k for k in range(10, 3, -1))
# relative variance below this is treated as cancellation error
VAR_ROUNDOFF = 1e-12

N_INIT = 3
N_CANDIDATES = 1024
N_REFINE = 50


class GpError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpGrid:
    lengthscales: tuple = LENGTHSCALE_GRID
    signal_vars: tuple = SIGNAL_VAR_GRID
    noise_vars: tuple = NOISE_VAR_GRID


@dataclass(frozen=True)
class GpSurrogate:
    space: DomainParamSpace
    grid: GpGrid = field(default_factory=GpGrid)
    X: np.ndarray = None  # unit-box inputs, (n, d)
    phis: np.ndarray = None  # raw inputs, (n, d)
    r: np.ndarray = None  # raw targets, (n,)
    y_mean: float = 0.0
    y_std: float = 1.0
    lengthscales: np.ndarray = None
    signal_var: float = 1.0
    noise_var: float = 0.0
    jitter: float = 0.0
    chol: np.ndarray = None
    alpha: np.ndarray = None
    log_ml: float = float("nan")

    @property
    def n_obs(self) -> int:
        return 0 if self.r is None else len(self.r)

    def hyperparams(self) -> dict:
        return {
            "lengthscales": None if self.lengthscales is None else self.lengthscales.tolist(),
            "signal_var": self.signal_var,
            "noise_var": self.noise_var,
            "jitter": self.jitter,
            "log_ml": self.log_ml,
        }


def empty_surrogate(space: DomainParamSpace, grid: GpGrid | None = None) -> GpSurrogate:
    return GpSurrogate(space=space, grid=grid or GpGrid())


def se_kernel(A: np.ndarray, B: np.ndarray, lengthscales, signal_var: float) -> np.ndarray:
    d = (A[:, None, :] - B[None, :, :]) / np.asarray(lengthscales)
    return signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))


def _cholesky(K: np.ndarray):
    n = K.shape[0]
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    return None, None


def gp_fit(phis, r, space: DomainParamSpace, grid: GpGrid | None = None) -> GpSurrogate:
    grid = grid or GpGrid()
    phis = np.atleast_2d(np.asarray(phis, dtype=float))
    r = np.asarray(r, dtype=float).reshape(-1)
    if len(r) < 1:
        raise GpError("gp_fit needs at least one observation")
    if phis.shape != (len(r), space.ndim):
        raise ValueError(f"expected inputs of shape {(len(r), space.ndim)}, got {phis.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite reward in observations")
    X = space.to_unit(phis)
    y_mean = float(np.mean(r))
    y_std = float(np.std(r))
    if y_std < 1e-12:
        y_std = 1.0
    y = (r - y_mean) / y_std
    n = len(y)

    sq = (X[:, None, :] - X[None, :, :]) ** 2
    best = None
    for ls in itertools.product(grid.lengthscales, repeat=space.ndim):
        ls = np.asarray(ls, dtype=float)
        base = np.exp(-0.5 * np.sum(sq / ls**2, axis=-1))
        for s2 in grid.signal_vars:
            for sn2 in grid.noise_vars:
                L, jitter = _cholesky(s2 * base + sn2 * np.eye(n))
                if L is None:
                    continue
                a = solve_triangular(L.T, solve_triangular(L, y, lower=True), lower=False)
                lml = -0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
                if best is None or lml > best[0]:
                    best = (lml, ls, s2, sn2, jitter, L, a)
    if best is None:
        raise GpError("kernel matrix singular for every hyperparameter setting after jitter escalation")
    lml, ls, s2, sn2, jitter, L, a = best
    return GpSurrogate(
        space=space, grid=grid, X=X, phis=phis.copy(), r=r.copy(), y_mean=y_mean, y_std=y_std,
        lengthscales=ls, signal_var=s2, noise_var=sn2, jitter=jitter, chol=L, alpha=a, log_ml=float(lml),
    )


def gp_predict(gp: GpSurrogate, phi):
    """Posterior mean and std of the latent reward, in reward units.

    Accepts a single point ``(d,)`` (returns floats) or a batch ``(m, d)``.
    With no observations the prior (mean 0, std 1) is returned.
    """
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    Xq = gp.space.to_unit(np.atleast_2d(phi))
    if gp.n_obs == 0:
        mean = np.zeros(len(Xq))
        std = np.ones(len(Xq))
    else:
        ks = se_kernel(Xq, gp.X, gp.lengthscales, gp.signal_var)
        mean_s = ks @ gp.alpha
        v = solve_triangular(gp.chol, ks.T, lower=True)
        var = gp.signal_var - np.sum(v * v, axis=0)
        if np.any(var < -1e-9 * gp.signal_var):
            raise GpError(f"posterior variance strongly negative ({var.min():.3e})")
        var = np.where(var < VAR_ROUNDOFF * gp.signal_var, 0.0, var)
        mean = mean_s * gp.y_std + gp.y_mean
        std = np.sqrt(var) * gp.y_std
    if single:
        return float(mean[0]), float(std[0])
    return mean, std


def ei_from_moments(mu, sigma, best_r):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = mu - best_r
    safe = np.where(sigma < 1e-12, 1.0, sigma)
    z = imp / safe
    ei = imp * norm.cdf(z) + safe * norm.pdf(z)
    ei = np.where(sigma < 1e-12, np.maximum(imp, 0.0), ei)
    return np.maximum(ei, 0.0)


def expected_improvement(gp: GpSurrogate, phi, best_r: float):
    mu, sigma = gp_predict(gp, phi)
    ei = ei_from_moments(mu, sigma, best_r)
    return float(ei) if np.ndim(ei) == 0 else ei


@dataclass(frozen=True)
class AcquisitionResult:
    candidate: np.ndarray
    value: float


def _init_design_point(space: DomainParamSpace, seed: int, index: int) -> np.ndarray:
    sampler = qmc.Halton(d=space.ndim, scramble=True, seed=np.random.default_rng(seed))
    return sampler.random(index + 1)[-1]


def maximize_ei(gp: GpSurrogate, rng, n_candidates: int = N_CANDIDATES, n_refine: int = N_REFINE) -> AcquisitionResult:
    space = gp.space
    best_r = float(np.max(gp.r))

    def acq(u):
        return ei_from_moments(*gp_predict(gp, space.from_unit(np.atleast_2d(u))), best_r)

    cands = rng.uniform(size=(n_candidates, space.ndim))
    vals = acq(cands)
    k = int(np.argmax(vals))
    x, fx = cands[k].copy(), float(vals[k])
    step = 0.05
    for _ in range(n_refine):
        improved = False
        for j in range(space.ndim):
            trial = np.repeat(x[None, :], 2, axis=0)
            trial[0, j] = min(1.0, x[j] + step)
            trial[1, j] = max(0.0, x[j] - step)
            tv = acq(trial)
            t = int(np.argmax(tv))
            if tv[t] > fx:
                x, fx, improved = trial[t], float(tv[t]), True
        if not improved:
            step *= 0.5
    cand = clamp_to_space(space.from_unit(x), space)
    return AcquisitionResult(cand, expected_improvement(gp, cand, best_r))


def bo_query(gp: GpSurrogate, seed: int, n_init: int = N_INIT) -> np.ndarray:
    """Next DR parameters to try.

    Below ``n_init`` observations a scrambled Halton point is returned (the
    design index is the observation count, so successive calls stratify);
    afterwards the EI maximizer.
    """
    space = gp.space
    if gp.n_obs < n_init:
        return clamp_to_space(space.from_unit(_init_design_point(space, seed, gp.n_obs)), space)
    rng = np.random.default_rng([seed, gp.n_obs])
    return maximize_ei(gp, rng).candidate


def bo_update(gp: GpSurrogate, phi, r: float) -> GpSurrogate:
    if not np.isfinite(r):
        raise ValueError(f"non-finite reward {r!r}")
    phi = np.asarray(phi, dtype=float).reshape(1, -1)
    if not gp.space.contains(phi[0]):
        raise ValueError(f"phi {phi[0]} outside the parameter space")
    phis = phi if gp.n_obs == 0 else np.vstack([gp.phis, phi])
    rs = np.array([r]) if gp.n_obs == 0 else np.append(gp.r, r)
    return gp_fit(phis, rs, gp.space, gp.grid)

