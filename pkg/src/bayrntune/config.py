"""Experiment configuration: flat ``key = value`` files with a typed schema.

Lines are ``key = value``; ``#`` starts a comment. Lists are comma separated.
Unknown keys, bad values and violated constraints raise ``ConfigError`` with
``source:line`` anchors. Command-line overrides use the same syntax and take
precedence over the file.

Keys (defaults in parentheses)::

    env                   puck-slide-1d | cartpole-dr | pendulum-dr  (puck-slide-1d)
    strategy              infinite-chain | best-only | normalized-closest | best-of-last-m:M  (infinite-chain)
    n_iterations          BO iterations N  (20)
    t_bootstrap           bootstrap budget in env steps  (160000)
    t_tune                fine-tuning budget per iteration  (32000)
    t_scratch             per-iteration budget of the Bayesian-DR baseline; 0 means t_bootstrap  (0)
    n_eval                ground-truth episodes per evaluation  (8)
    seeds                 comma-separated integers  (0)
    population            ES population  (16)
    noise_std             ES perturbation std  (0.05)
    step_size             ES step size  (0.02)
    antithetic            true | false  (true)
    rank_shaping          true | false  (true)
    dr_mode               point | gaussian-band  (gaussian-band)
    relative_std          band width as a fraction of each range  (0.05)
    bootstrap_full_range  bootstrap over the whole box instead of its center  (false)
    ground_truth          comma-separated values overriding the env default
    ground_truth_noise    comma-separated per-dimension std of the ground truth
    hidden                policy hidden width  (16)
    n_init                quasi-random BO proposals before EI  (3)
    output_dir            default output root (env BAYRNTUNE_OUT, else ./runs)
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .envs import DR_MODES, DYNAMICS, EnvError, EnvSpec, make_spec
from .es import EsConfig
from .strategies import StrategyKind, parse_strategy


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {sorted(options)}, got {text!r}")
        return text
    return conv


SCHEMA = {
    "env": _choice(DYNAMICS),
    "strategy": lambda t: str(parse_strategy(t)),
    "n_iterations": int,
    "t_bootstrap": int,
    "t_tune": int,
    "t_scratch": int,
    "n_eval": int,
    "seeds": _ints,
    "population": int,
    "noise_std": float,
    "step_size": float,
    "antithetic": _bool,
    "rank_shaping": _bool,
    "dr_mode": _choice(DR_MODES),
    "relative_std": float,
    "bootstrap_full_range": _bool,
    "ground_truth": _floats,
    "ground_truth_noise": _floats,
    "hidden": int,
    "n_init": int,
    "output_dir": str,
}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "puck-slide-1d"
    strategy: str = "infinite-chain"
    n_iterations: int = 20
    t_bootstrap: int = 160_000
    t_tune: int = 32_000
    t_scratch: int = 0
    n_eval: int = 8
    seeds: tuple = (0,)
    population: int = 16
    noise_std: float = 0.05
    step_size: float = 0.02
    antithetic: bool = True
    rank_shaping: bool = True
    dr_mode: str = "gaussian-band"
    relative_std: float = 0.05
    bootstrap_full_range: bool = False
    ground_truth: tuple = ()
    ground_truth_noise: tuple = ()
    hidden: int = 16
    n_init: int = 3
    output_dir: str = field(default_factory=lambda: os.environ.get("BAYRNTUNE_OUT", "runs"))
    text: str = field(default="", compare=False, repr=False)

    @property
    def es(self) -> EsConfig:
        return EsConfig(self.population, self.noise_std, self.step_size, self.antithetic, self.rank_shaping)

    @property
    def strategy_kind(self) -> StrategyKind:
        return parse_strategy(self.strategy)

    @property
    def scratch_budget(self) -> int:
        return self.t_scratch or self.t_bootstrap

    @property
    def total_budget(self) -> int:
        return self.t_bootstrap + self.n_iterations * self.t_tune

    def env_spec(self) -> EnvSpec:
        spec = make_spec(self.env, dr_mode=self.dr_mode, relative_std=self.relative_std)
        if self.ground_truth or self.ground_truth_noise:
            spec = spec.with_ground_truth(self.ground_truth or None, self.ground_truth_noise or None)
        return spec

    def validate(self) -> None:
        """Raise ``ValueError`` naming the offending key."""
        try:
            es = self.es
        except ValueError as exc:
            key = "noise_std" if "noise" in str(exc) else "population"
            raise ValueError(f"{key}: {exc}") from None
        gen = es.population * make_spec(self.env).horizon
        if self.n_iterations < 1:
            raise ValueError("n_iterations: must be >= 1")
        for key in ("t_bootstrap", "t_tune"):
            if getattr(self, key) < gen:
                raise ValueError(f"{key}: must be at least one ES generation ({gen} steps)")
        if self.t_scratch and self.t_scratch < gen:
            raise ValueError(f"t_scratch: must be 0 or at least one ES generation ({gen} steps)")
        if self.n_eval < 1:
            raise ValueError("n_eval: must be >= 1")
        if not self.seeds:
            raise ValueError("seeds: at least one seed required")
        if self.hidden < 1 or self.n_init < 1:
            raise ValueError("hidden/n_init: must be >= 1")
        ndim = make_spec(self.env).space.ndim
        for key in ("ground_truth", "ground_truth_noise"):
            v = getattr(self, key)
            if v and len(v) != ndim:
                raise ValueError(f"{key}: expected {ndim} values for {self.env}, got {len(v)}")
        try:
            self.env_spec()
        except EnvError as exc:
            raise ValueError(f"ground_truth: {exc}") from None


def _split_line(line: str):
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    key, sep, value = body.partition("=")
    if not sep:
        raise ValueError(f"expected 'key = value', got {body!r}")
    return key.strip(), value.strip()


def parse_config(text: str, source: str = "<config>", overrides=()) -> ExperimentConfig:
    """Parse config text plus ``key=value`` overrides into a validated config."""
    raw: dict[str, tuple[str, str]] = {}
    entries = [(f"{source}:{n}", line) for n, line in enumerate(text.splitlines(), 1)]
    entries += [(f"override {o!r}", o) for o in overrides]
    for where, line in entries:
        try:
            kv = _split_line(line)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if kv is None:
            continue
        key, value = kv
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        raw[key] = (where, value)
    values = {}
    for key, (where, value) in raw.items():
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(**values, text=text)
    try:
        cfg.validate()
    except ValueError as exc:
        msg = str(exc)
        named = [k for k in raw if msg.startswith(k)]
        where = raw[named[0]][0] if named else source
        raise ConfigError(f"{where}: {msg}") from None
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved ``key = value`` text that ``parse_config`` reads back to an equal config."""
    lines = []
    for f in fields(cfg):
        if f.name == "text":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            if not v:
                continue
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
