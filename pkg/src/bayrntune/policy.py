"""Deterministic one-hidden-layer tanh policy over a flat parameter vector, plus checkpoints."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"BRTC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int
    hidden: int
    act_dim: int

    @property
    def n_params(self) -> int:
        return self.obs_dim * self.hidden + self.hidden + self.hidden * self.act_dim + self.act_dim


@dataclass(frozen=True)
class PolicyParams:
    arch: PolicyArch
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.arch.n_params:
            raise ValueError(f"expected {self.arch.n_params} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("policy parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)


def policy_init(arch: PolicyArch, rng) -> PolicyParams:
    rng = np.random.default_rng(rng)
    a1 = 1.0 / np.sqrt(arch.obs_dim)
    a2 = 1.0 / np.sqrt(arch.hidden)
    n1 = arch.obs_dim * arch.hidden + arch.hidden
    n2 = arch.hidden * arch.act_dim + arch.act_dim
    theta = np.concatenate([rng.uniform(-a1, a1, n1), rng.uniform(-a2, a2, n2)])
    return PolicyParams(arch, theta)


def unpack(arch: PolicyArch, thetas: np.ndarray):
    """Split a batch of flat vectors ``(B, P)`` into ``W1, b1, W2, b2``."""
    B = thetas.shape[0]
    o, h, a = arch.obs_dim, arch.hidden, arch.act_dim
    i = 0
    W1 = thetas[:, i:i + h * o].reshape(B, h, o); i += h * o
    b1 = thetas[:, i:i + h]; i += h
    W2 = thetas[:, i:i + a * h].reshape(B, a, h); i += a * h
    b2 = thetas[:, i:i + a]
    return W1, b1, W2, b2


def act_batch(arch: PolicyArch, thetas: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Actions for ``B`` (policy, observation) pairs; ``thetas`` is ``(B, P)``, ``obs`` is ``(B, obs_dim)``."""
    W1, b1, W2, b2 = unpack(arch, thetas)
    hid = np.tanh(np.einsum("bho,bo->bh", W1, obs) + b1)
    return np.tanh(np.einsum("bah,bh->ba", W2, hid) + b2)


def policy_act(params: PolicyParams, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.arch.obs_dim,):
        raise ValueError(f"observation shape {obs.shape} does not match obs_dim={params.arch.obs_dim}")
    return act_batch(params.arch, params.theta[None, :], obs[None, :])[0]


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class CheckpointMeta:
    iteration: int = 0
    parent: int = -1
    reward: float = float("nan")
    phi: tuple = field(default_factory=tuple)


# magic, version, obs, hidden, act, iteration, parent, reward, n_phi, n_params
_HEADER = struct.Struct("<4sIIIIqqdII")


def save_checkpoint(params: PolicyParams, path, meta: CheckpointMeta | None = None) -> Path:
    """Write ``params`` as little-endian float64 with a self-describing header and CRC32 trailer."""
    meta = meta or CheckpointMeta()
    a = params.arch
    phi = np.asarray(meta.phi, dtype="<f8")
    body = _HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, a.obs_dim, a.hidden, a.act_dim,
        int(meta.iteration), int(meta.parent), float(meta.reward), phi.size, a.n_params,
    ) + phi.tobytes() + params.theta.astype("<f8").tobytes()
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def read_checkpoint(path) -> tuple[PolicyParams, CheckpointMeta]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise CorruptCheckpointError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, o, h, a, it, parent, reward, n_phi, n_params = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    expected = _HEADER.size + 8 * (n_phi + n_params) + 4
    if len(data) != expected:
        raise CorruptCheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc != zlib.crc32(data[: expected - 4]):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    phi = np.frombuffer(data, "<f8", n_phi, _HEADER.size)
    theta = np.frombuffer(data, "<f8", n_params, _HEADER.size + 8 * n_phi)
    arch = PolicyArch(o, h, a)
    if arch.n_params != n_params:
        raise CorruptCheckpointError(f"{path}: parameter count {n_params} inconsistent with {arch}")
    meta = CheckpointMeta(it, parent, reward, tuple(float(x) for x in phi))
    return PolicyParams(arch, theta.astype(np.float64)), meta


def load_checkpoint(path, arch: PolicyArch | None = None) -> PolicyParams:
    params, _ = read_checkpoint(path)
    if arch is not None and params.arch != arch:
        raise ArchMismatchError(f"{path}: checkpoint has {params.arch}, expected {arch}")
    return params
