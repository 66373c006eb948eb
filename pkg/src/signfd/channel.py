"""Worker-to-server links as binary symmetric channels, plus sign-flip attacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream, SignVector


def _check_probability(name: str, value) -> None:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class BscParams:
    """Crossover probability of one worker's channel.

    ``crossover`` is a scalar or a per-coordinate array.
    """

    crossover: float | np.ndarray

    def __post_init__(self):
        _check_probability("crossover", self.crossover)


@dataclass(frozen=True)
class AttackSpec:
    """Compromised worker set (0-based indices) and per-coordinate flip probability."""

    compromised: frozenset = frozenset()
    flip_prob: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "compromised", frozenset(int(m) for m in self.compromised))
        _check_probability("flip_prob", self.flip_prob)
        if any(m < 0 for m in self.compromised):
            raise ValueError("worker indices must be non-negative")

    @classmethod
    def none(cls) -> "AttackSpec":
        return cls(frozenset(), 0.0)

    @classmethod
    def first(cls, num_compromised: int, flip_prob: float = 1.0) -> "AttackSpec":
        """Compromise workers ``0 .. num_compromised-1``."""
        if num_compromised < 0:
            raise ValueError("num_compromised must be non-negative")
        return cls(frozenset(range(num_compromised)), flip_prob)

    @property
    def size(self) -> int:
        return len(self.compromised)

    def validate(self, num_workers: int) -> None:
        out = sorted(m for m in self.compromised if m >= num_workers)
        if out:
            raise ValueError(f"compromised workers {out} outside 0..{num_workers - 1}")

    def mask(self, num_workers: int) -> np.ndarray:
        self.validate(num_workers)
        mask = np.zeros(num_workers, dtype=bool)
        mask[list(self.compromised)] = True
        return mask


def bsc_transmit(truth: SignVector, params: BscParams, rng: RngStream) -> SignVector:
    """Flip each coordinate of ``truth`` independently with the crossover probability."""
    p = np.broadcast_to(np.asarray(params.crossover, dtype=np.float64), (truth.length,))
    flips = rng.random(truth.length) < p
    return truth.flip(flips)


def apply_attack(signs: SignVector, worker: int, spec: AttackSpec, rng: RngStream) -> SignVector:
    """Apply the stochastic sign-flip attack if ``worker`` is compromised.

    With ``flip_prob == 1`` this is the deterministic sign inversion, and the
    random stream is not consumed.
    """
    if worker < 0:
        raise ValueError(f"invalid worker index {worker}")
    if worker not in spec.compromised:
        return signs
    if spec.flip_prob == 1.0:
        return -signs
    if spec.flip_prob == 0.0:
        return signs
    return signs.flip(rng.random(signs.length) < spec.flip_prob)


def effective_crossover(p, r):
    """Crossover of a BSC(p) followed by an independent BSC(r): ``p + r(1 - 2p)``."""
    _check_probability("p", p)
    _check_probability("r", r)
    out = np.asarray(p, dtype=np.float64) + np.asarray(r, dtype=np.float64) * (
        1.0 - 2.0 * np.asarray(p, dtype=np.float64)
    )
    return float(out) if out.ndim == 0 else out


def effective_crossovers(p, spec: AttackSpec):
    """Per-worker crossover after the attack: compromised entries get the cascade value."""
    p = np.asarray(p, dtype=np.float64).copy()
    mask = spec.mask(p.shape[0])
    p[mask] = effective_crossover(p[mask], spec.flip_prob)
    return p
