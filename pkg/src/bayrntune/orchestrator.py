"""The BayRnTune outer loop, its baselines, run-directory I/O and curve aggregation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .envs import EnvSpec, real_eval, sample_ground_truth
from .es import TrainResult, bootstrap_train, pol_opt, uniform_sampler
from .gp import bo_query, bo_update, empty_surrogate
from .params import RunningStats, update_stats
from .policy import CheckpointMeta, PolicyParams, policy_init, save_checkpoint
from .strategies import FRESH_INIT, History, HistoryEntry, select_checkpoint

log = logging.getLogger(__name__)

RUNNERS = ("bayrntune", "vanilla-dr", "bayesian-dr", "oracle")

# stream tags for independent RNG streams derived from the run seed
_BOOT, _EVAL, _TUNE, _BO, _INIT = range(5)


def _seed(seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *tags])


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(_seed(seed, *tags))


def _bo_seed(seed: int) -> int:
    return int(_seed(seed, _BO).generate_state(1)[0])


@dataclass(frozen=True)
class IterationRow:
    iteration: int
    parent: int
    phi: tuple
    reward: float
    consumed: int
    cumulative: int
    wall_clock: float = 0.0

    def key(self) -> tuple:
        """Everything but wall-clock time, for determinism checks."""
        return (self.iteration, self.parent, self.phi, self.reward, self.consumed, self.cumulative)


@dataclass(frozen=True)
class CurvePoint:
    timesteps: int
    reward: float


@dataclass
class RunRecord:
    runner: str
    seed: int
    env: str
    dim_names: tuple
    strategy: str = ""
    rows: list = field(default_factory=list)
    bo_observations: list | None = None  # (phi, r) pairs; None for runners without BO
    bo_hyperparams: dict | None = None
    train_curves: list = field(default_factory=list)  # (iteration, generation, steps, mean return)

    @property
    def best_iteration(self) -> int:
        r = np.array([row.reward for row in self.rows])
        return self.rows[int(np.flatnonzero(r == r.max())[0])].iteration

    @property
    def best_reward(self) -> float:
        return max(row.reward for row in self.rows)

    @property
    def total_steps(self) -> int:
        return self.rows[-1].cumulative if self.rows else 0

    def keys(self) -> list:
        return [row.key() for row in self.rows]


# --- run directory -----------------------------------------------------------------


class RunWriter:
    """Streams a record to its run directory so partial progress survives failures."""

    def __init__(self, run_dir, record: RunRecord, cfg: ExperimentConfig, overrides=()):
        self.dir = Path(run_dir) if run_dir is not None else None
        self.record = record
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        snap = cfg.text
        if overrides:
            snap += "\n# overrides\n" + "\n".join(overrides) + "\n"
        (self.dir / "config.snapshot").write_text(snap)
        names = [f"phi_{n}" for n in record.dim_names]
        self._open("history.csv", ["iteration", "parent", *names, "reward", "consumed_steps", "cumulative_steps", "wall_clock"])
        self._open("train_curves.csv", ["iteration", "generation", "steps", "mean_return"])
        if record.bo_observations is not None:
            self._open("bo_observations.csv", [*names, "reward"])

    def _open(self, name, header):
        with open(self.dir / name, "w", newline="") as fh:
            csv.writer(fh).writerow(header)

    def _append(self, name, row):
        with open(self.dir / name, "a", newline="") as fh:
            csv.writer(fh).writerow(row)

    def add(self, row: IterationRow, train: TrainResult | None, params: PolicyParams | None):
        self.record.rows.append(row)
        if train is not None:
            for g, (steps, mean) in enumerate(train.curve):
                self.record.train_curves.append((row.iteration, g, steps, mean))
        if self.dir is None:
            return
        self._append("history.csv", [row.iteration, row.parent, *[repr(float(x)) for x in row.phi],
                                     repr(row.reward), row.consumed, row.cumulative, repr(row.wall_clock)])
        if train is not None:
            for g, (steps, mean) in enumerate(train.curve):
                self._append("train_curves.csv", [row.iteration, g, steps, repr(mean)])
        if params is not None:
            save_checkpoint(params, self.dir / f"ckpt_{row.iteration}.bin",
                            CheckpointMeta(row.iteration, row.parent, row.reward, row.phi))

    def add_observation(self, phi, r):
        self.record.bo_observations.append((tuple(float(x) for x in phi), float(r)))
        if self.dir is not None:
            self._append("bo_observations.csv", [*[repr(float(x)) for x in phi], repr(float(r))])

    def finish(self, status: str = "ok", error: str | None = None):
        if self.dir is None:
            return
        rec = self.record
        curve = max_historical_curve(rec)
        with open(self.dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cumulative_steps", "max_historical_reward"])
            for p in curve:
                w.writerow([p.timesteps, repr(p.reward)])
        meta = {
            "runner": rec.runner, "seed": rec.seed, "env": rec.env, "strategy": rec.strategy,
            "status": status, "error": error, "dims": list(rec.dim_names),
            "best_iteration": rec.best_iteration if rec.rows else None,
            "best_reward": rec.best_reward if rec.rows else None,
            "total_steps": rec.total_steps, "bo_hyperparams": rec.bo_hyperparams,
        }
        (self.dir / "run.json").write_text(json.dumps(meta, indent=2))


def _segment_budget(target: int, cumulative: int, cfg: ExperimentConfig) -> int:
    """Steps for the next training segment so the running total tracks its schedule.

    Episodes that end early make ES overshoot a budget by up to one generation;
    charging that overshoot to the next segment keeps every runner within one
    generation of the scheduled total.
    """
    return max(target - cumulative, cfg.population * cfg.env_spec().horizon)


def _new_record(runner: str, cfg: ExperimentConfig, spec: EnvSpec, seed: int, with_bo: bool) -> RunRecord:
    return RunRecord(
        runner=runner, seed=seed, env=spec.id, dim_names=tuple(spec.space.names),
        strategy=cfg.strategy if runner == "bayrntune" else "",
        bo_observations=[] if with_bo else None,
    )


def _guarded(fn):
    """Flush whatever was recorded before re-raising a failure."""
    def wrapper(cfg, seed=None, run_dir=None, overrides=()):
        seed = cfg.seeds[0] if seed is None else seed
        writer_box = []
        try:
            rec = fn(cfg, seed, run_dir, overrides, writer_box)
        except Exception as exc:
            if writer_box:
                writer_box[0].finish("failed", f"{type(exc).__name__}: {exc}")
            raise
        writer_box[0].finish()
        return rec
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- runners ---------------------------------------------------------------------


@_guarded
def run_bayrntune(cfg: ExperimentConfig, seed, run_dir, overrides, box) -> RunRecord:
    """Bootstrap, then N rounds of propose -> pick checkpoint -> fine-tune -> evaluate -> update."""
    spec = cfg.env_spec()
    es = cfg.es
    kind = cfg.strategy_kind
    rec = _new_record("bayrntune", cfg, spec, seed, with_bo=True)
    out = RunWriter(run_dir, rec, cfg, overrides)
    box.append(out)
    t0 = time.perf_counter()

    phi0 = spec.space.center()
    boot = bootstrap_train(spec, es, cfg.t_bootstrap, _seed(seed, _BOOT), cfg.hidden,
                           cfg.bootstrap_full_range, cfg.t_tune)
    r0 = real_eval(spec, boot.params, cfg.n_eval, _seed(seed, _EVAL, 0))
    history = History()
    history.append(HistoryEntry(0, phi0, r0, FRESH_INIT, boot.params))
    cumulative = boot.consumed
    out.add(IterationRow(0, FRESH_INIT, tuple(phi0), r0, boot.consumed, cumulative,
                         time.perf_counter() - t0), boot, boot.params)

    gp = bo_update(empty_surrogate(spec.space), phi0, r0)
    out.add_observation(phi0, r0)
    stats = update_stats(RunningStats.empty(spec.space.ndim), phi0)
    bo_seed = _bo_seed(seed)
    for i in range(1, cfg.n_iterations + 1):
        phi = bo_query(gp, bo_seed, cfg.n_init)
        stats = update_stats(stats, phi)
        parent = select_checkpoint(kind, phi, history, stats)
        start = history.by_iteration(parent).params
        budget = _segment_budget(cfg.t_bootstrap + i * cfg.t_tune, cumulative, cfg)
        res = pol_opt(start, spec, phi, budget, es, _seed(seed, _TUNE, i))
        r = real_eval(spec, res.params, cfg.n_eval, _seed(seed, _EVAL, i))
        gp = bo_update(gp, phi, r)
        out.add_observation(phi, r)
        history.append(HistoryEntry(i, phi, r, parent, res.params))
        cumulative += res.consumed
        out.add(IterationRow(i, parent, tuple(phi), r, res.consumed, cumulative,
                             time.perf_counter() - t0), res, res.params)
        log.info("iter %d phi=%s parent=%d r=%.3f", i, np.round(phi, 4), parent, r)
    rec.bo_hyperparams = gp.hyperparams()
    return rec


def _continuous_run(runner, cfg, seed, run_dir, overrides, box, sampler, nominal_phi) -> RunRecord:
    """One policy trained without adaptation, evaluated at the BayRnTune cadence."""
    spec = cfg.env_spec()
    rec = _new_record(runner, cfg, spec, seed, with_bo=False)
    out = RunWriter(run_dir, rec, cfg, overrides)
    box.append(out)
    t0 = time.perf_counter()
    params = policy_init(spec.arch(cfg.hidden), _rng(seed, _INIT))
    cumulative = 0
    for k in range(cfg.n_iterations + 1):
        budget = _segment_budget(cfg.t_bootstrap + k * cfg.t_tune, cumulative, cfg)
        res = pol_opt(params, spec, None, budget, cfg.es, _seed(seed, _TUNE, k), episode_sampler=sampler)
        params = res.params
        r = real_eval(spec, params, cfg.n_eval, _seed(seed, _EVAL, k))
        cumulative += res.consumed
        out.add(IterationRow(k, k - 1, tuple(nominal_phi), r, res.consumed, cumulative,
                             time.perf_counter() - t0), res, params)
        log.info("eval %d steps=%d r=%.3f", k, cumulative, r)
    return rec


@_guarded
def run_vanilla_dr(cfg: ExperimentConfig, seed, run_dir, overrides, box) -> RunRecord:
    """Uniform DR over the whole box for the full budget."""
    spec = cfg.env_spec()
    return _continuous_run("vanilla-dr", cfg, seed, run_dir, overrides, box,
                           uniform_sampler(spec.space), spec.space.center())


@_guarded
def run_oracle(cfg: ExperimentConfig, seed, run_dir, overrides, box) -> RunRecord:
    """Training directly on the ground-truth parameter distribution."""
    spec = cfg.env_spec()

    def sampler(n, rng):
        return sample_ground_truth(spec, n, rng)

    return _continuous_run("oracle", cfg, seed, run_dir, overrides, box, sampler, spec.ground_truth.phi)


@_guarded
def run_bayesian_dr(cfg: ExperimentConfig, seed, run_dir, overrides, box) -> RunRecord:
    """BO over DR parameters with a fresh policy trained from scratch at every proposal."""
    spec = cfg.env_spec()
    rec = _new_record("bayesian-dr", cfg, spec, seed, with_bo=True)
    out = RunWriter(run_dir, rec, cfg, overrides)
    box.append(out)
    t0 = time.perf_counter()
    n_steps = scratch_iterations(cfg)
    gp = empty_surrogate(spec.space)
    bo_seed = _bo_seed(seed)
    cumulative = 0
    for i in range(1, n_steps + 1):
        phi = bo_query(gp, bo_seed, cfg.n_init)
        params = policy_init(spec.arch(cfg.hidden), _rng(seed, _INIT, i))
        budget = _segment_budget(i * cfg.scratch_budget, cumulative, cfg)
        res = pol_opt(params, spec, phi, budget, cfg.es, _seed(seed, _TUNE, i))
        r = real_eval(spec, res.params, cfg.n_eval, _seed(seed, _EVAL, i))
        gp = bo_update(gp, phi, r)
        out.add_observation(phi, r)
        cumulative += res.consumed
        out.add(IterationRow(i, FRESH_INIT, tuple(phi), r, res.consumed, cumulative,
                             time.perf_counter() - t0), res, res.params)
        log.info("iter %d phi=%s r=%.3f", i, np.round(phi, 4), r)
    rec.bo_hyperparams = gp.hyperparams()
    return rec


def scratch_iterations(cfg: ExperimentConfig) -> int:
    """BO iterations the from-scratch baseline fits into the BayRnTune budget (at least one)."""
    return max(1, cfg.total_budget // cfg.scratch_budget)


RUNNER_FNS = {
    "bayrntune": run_bayrntune,
    "vanilla-dr": run_vanilla_dr,
    "bayesian-dr": run_bayesian_dr,
    "oracle": run_oracle,
}


def run(runner: str, cfg: ExperimentConfig, seed: int, run_dir=None, overrides=()) -> RunRecord:
    try:
        fn = RUNNER_FNS[runner]
    except KeyError:
        raise ValueError(f"unknown runner {runner!r}; known: {list(RUNNER_FNS)}") from None
    return fn(cfg, seed, run_dir, overrides)


# --- curves ----------------------------------------------------------------------


class CadenceError(ValueError):
    pass


def max_historical_curve(record) -> list:
    """Running maximum of the evaluated reward against cumulative timesteps.

    Accepts a ``RunRecord`` or a sequence of ``(timesteps, reward)`` pairs.
    """
    rows = record.rows if isinstance(record, RunRecord) else record
    out, best = [], -np.inf
    for row in rows:
        ts, r = (row.cumulative, row.reward) if isinstance(row, IterationRow) else row
        best = max(best, float(r))
        out.append(CurvePoint(int(ts), best))
    return out


def resample(curve, grid) -> np.ndarray:
    """Last-value carry-forward of ``curve`` onto ``grid``."""
    ts = np.array([p.timesteps for p in curve])
    vals = np.array([p.reward for p in curve])
    idx = np.searchsorted(ts, grid, side="right") - 1
    if np.any(idx < 0):
        raise CadenceError("grid starts before the curve's first evaluation")
    return vals[idx]


def aggregate_seeds(curves, mode: str = "median") -> list:
    """Pointwise median or mean over seeds.

    Curves on different cadences are resampled by carry-forward onto the union
    of their timesteps, starting where every curve has a value.
    """
    curves = [list(c) for c in curves]
    if not curves:
        raise ValueError("aggregate_seeds needs at least one curve")
    if any(not c for c in curves):
        raise CadenceError("empty curve")
    if mode not in ("median", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    start = max(c[0].timesteps for c in curves)
    grid = np.array(sorted({p.timesteps for c in curves for p in c if p.timesteps >= start}))
    stacked = np.vstack([resample(c, grid) for c in curves])
    agg = np.median(stacked, axis=0) if mode == "median" else np.mean(stacked, axis=0)
    return [CurvePoint(int(t), float(v)) for t, v in zip(grid, agg)]


def lineage(record: RunRecord, iteration: int) -> list:
    """Iterations from ``iteration`` back to a fresh-init root; raises on cycles or dangling links."""
    parents = {row.iteration: row.parent for row in record.rows}
    chain, seen = [iteration], {iteration}
    while parents[chain[-1]] != FRESH_INIT:
        nxt = parents[chain[-1]]
        if nxt in seen or nxt not in parents:
            raise ValueError(f"broken lineage at iteration {chain[-1]} -> {nxt}")
        chain.append(nxt)
        seen.add(nxt)
    return chain


# --- reading run directories -----------------------------------------------------------


def load_record(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    hist_path = run_dir / "history.csv"
    if not hist_path.exists():
        raise FileNotFoundError(f"{hist_path} not found")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(hist_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        phi_cols = [h for h in header if h.startswith("phi_")]
        rows = []
        for line in reader:
            d = dict(zip(header, line))
            rows.append(IterationRow(
                int(d["iteration"]), int(d["parent"]), tuple(float(d[c]) for c in phi_cols),
                float(d["reward"]), int(d["consumed_steps"]), int(d["cumulative_steps"]),
                float(d["wall_clock"]),
            ))
    rec = RunRecord(
        runner=meta.get("runner", run_dir.name), seed=meta.get("seed", 0), env=meta.get("env", ""),
        dim_names=tuple(c[4:] for c in phi_cols), strategy=meta.get("strategy", ""), rows=rows,
        bo_hyperparams=meta.get("bo_hyperparams"),
    )
    return rec
