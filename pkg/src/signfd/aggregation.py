"""Server-side sign decoders.

Three aggregators share one interface (``decode(received, t) -> SignVector``):

* :class:`MajorityVote` -- plain coordinate-wise majority.
* :class:`OracleWMV` -- weighted majority with fixed log-likelihood-ratio weights.
* :class:`FederatedDefense` -- weighted majority whose weights are learned online
  by comparing every worker's vote with the decoded sign (two-phase estimator).

Zero-sum votes decode to +1 everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import SignVector, stack_signs

STATE_FORMAT = "signfd.crossover-estimate"
STATE_VERSION = 1

_ORACLE_EPS = 1e-12


def llr(p) -> np.ndarray:
    """Log-likelihood-ratio weight ``ln((1 - p) / p)`` of a BSC with crossover ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return np.log1p(-p) - np.log(p)


@dataclass(frozen=True, eq=False)
class LLRWeightTable:
    """Decoding weights, shape ``(M,)`` per worker or ``(M, N)`` per coordinate.

    When built from crossover probabilities the probabilities are kept in
    ``crossover`` and ``weights == llr(crossover)``.
    """

    weights: np.ndarray
    crossover: np.ndarray | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim not in (1, 2) or w.shape[0] == 0:
            raise ValueError(f"weights must have shape (M,) or (M, N), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_crossover(cls, p) -> "LLRWeightTable":
        p = np.array(p, dtype=np.float64)
        if np.any((p <= 0) | (p >= 1)):
            raise ValueError("crossover probabilities must lie strictly inside (0, 1)")
        return cls(llr(p), p)

    @classmethod
    def uniform(cls, num_workers: int, value: float = 1.0) -> "LLRWeightTable":
        return cls(np.full(num_workers, float(value)))

    @property
    def num_workers(self) -> int:
        return self.weights.shape[0]

    @property
    def per_coordinate(self) -> bool:
        return self.weights.ndim == 2

    def as_matrix(self, dim: int) -> np.ndarray:
        """Broadcastable ``(M, 1)`` or ``(M, N)`` array for a length-``dim`` decode."""
        if self.per_coordinate:
            if self.weights.shape[1] != dim:
                raise ValueError(f"weight table has {self.weights.shape[1]} coordinates, votes have {dim}")
            return self.weights
        return self.weights[:, None]


def decode_votes(votes: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Decode an ``(M, N)`` +/-1 matrix; returns a boolean array, True where the result is -1.

    ``weights`` is ``(M,)`` per worker or anything broadcastable to ``(M, N)``.
    """
    if weights is None:
        total = votes.sum(axis=0, dtype=np.int64)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim == 1:
            weights = weights[:, None]
        total = (weights * votes).sum(axis=0)
    return total < 0


def mv_decode(received) -> SignVector:
    """Coordinate-wise majority vote."""
    votes = stack_signs(received)
    return SignVector.from_bits(decode_votes(votes))


def wmv_decode(received, weights: LLRWeightTable | np.ndarray) -> SignVector:
    """Coordinate-wise weighted majority vote ``sign(sum_m w_m Y_m)``."""
    if not isinstance(weights, LLRWeightTable):
        weights = LLRWeightTable(weights)
    votes = stack_signs(received)
    if weights.num_workers != votes.shape[0]:
        raise ValueError(f"{weights.num_workers} weights for {votes.shape[0]} workers")
    return SignVector.from_bits(decode_votes(votes, weights.as_matrix(votes.shape[1])))


def oracle_weights(true_p, eps: float = _ORACLE_EPS) -> LLRWeightTable:
    """LLR weights from known crossover probabilities, clamped into ``[eps, 1 - eps]``."""
    p = np.asarray(true_p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError(f"crossover probabilities must lie in [0, 1], got {true_p!r}")
    return LLRWeightTable.from_crossover(np.clip(p, eps, 1.0 - eps))


@dataclass(frozen=True)
class FdConfig:
    """Federated-defense settings.

    ``initial_decoder`` picks the decoder used while ``t <= initial_phase``:
    ``"wmv"`` decodes with the evolving pooled weights, ``"mv"`` ignores them.
    """

    initial_phase: int = 50
    initial_weight: float = 1.0
    estimator_policy: str = "two-phase"
    initial_decoder: str = "wmv"

    def __post_init__(self):
        if self.initial_phase < 1:
            raise ValueError("initial_phase must be >= 1")
        if not np.isfinite(self.initial_weight):
            raise ValueError("initial_weight must be finite")
        if self.estimator_policy != "two-phase":
            raise ValueError(f"unknown estimator_policy {self.estimator_policy!r}")
        if self.initial_decoder not in ("wmv", "mv"):
            raise ValueError(f"initial_decoder must be 'wmv' or 'mv', got {self.initial_decoder!r}")


@dataclass
class CrossoverEstimate:
    """Running disagreement tallies behind the crossover estimates.

    ``pooled_errors[m]`` counts disagreements of worker ``m`` over all
    coordinates during the initial phase; ``coord_errors[m, n]`` counts them
    per coordinate afterwards. ``snapshot`` holds the pooled estimate frozen
    at the end of the initial phase.
    """

    num_workers: int
    dim: int
    iterations: int = 0
    pooled_errors: np.ndarray = field(default=None)
    coord_errors: np.ndarray = field(default=None)
    snapshot: np.ndarray | None = None

    def __post_init__(self):
        if self.num_workers < 1 or self.dim < 1:
            raise ValueError("num_workers and dim must be positive")
        if self.pooled_errors is None:
            self.pooled_errors = np.zeros(self.num_workers, dtype=np.int64)
        if self.coord_errors is None:
            self.coord_errors = np.zeros((self.num_workers, self.dim), dtype=np.int64)
        self.pooled_errors = np.asarray(self.pooled_errors, dtype=np.int64)
        self.coord_errors = np.asarray(self.coord_errors, dtype=np.int64)
        if self.pooled_errors.shape != (self.num_workers,):
            raise ValueError("pooled_errors shape mismatch")
        if self.coord_errors.shape != (self.num_workers, self.dim):
            raise ValueError("coord_errors shape mismatch")
        if self.snapshot is not None:
            self.snapshot = np.asarray(self.snapshot, dtype=np.float64)

    def copy(self) -> "CrossoverEstimate":
        return CrossoverEstimate(
            self.num_workers,
            self.dim,
            self.iterations,
            self.pooled_errors.copy(),
            self.coord_errors.copy(),
            None if self.snapshot is None else self.snapshot.copy(),
        )

    def in_initial_phase(self, cfg: FdConfig) -> bool:
        return self.iterations <= cfg.initial_phase

    def samples_seen(self, cfg: FdConfig) -> int:
        """Effective number of samples behind each current estimate."""
        if self.in_initial_phase(cfg):
            return self.dim * self.iterations
        return self.iterations

    def error_count(self, cfg: FdConfig) -> np.ndarray:
        if self.in_initial_phase(cfg):
            return self.pooled_errors
        return self.coord_errors

    def estimate(self, cfg: FdConfig) -> np.ndarray | None:
        """Clamped crossover estimate for the next iteration; ``None`` before any data.

        Shape ``(M,)`` during the initial phase and ``(M, N)`` afterwards.
        """
        t = self.iterations
        if t == 0:
            return None
        if t <= cfg.initial_phase:
            raw = self.pooled_errors / (self.dim * t)
        else:
            t_in = cfg.initial_phase
            raw = (t_in * self.snapshot[:, None] + self.coord_errors) / t
        eps = 1.0 / (2.0 * self.samples_seen(cfg) + 2.0)
        return np.clip(raw, eps, 1.0 - eps)

    def weights(self, cfg: FdConfig) -> LLRWeightTable:
        p = self.estimate(cfg)
        if p is None:
            return LLRWeightTable.uniform(self.num_workers, cfg.initial_weight)
        return LLRWeightTable.from_crossover(p)

    def to_dict(self) -> dict:
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "num_workers": self.num_workers,
            "dim": self.dim,
            "iterations": self.iterations,
            "pooled_errors": self.pooled_errors.tolist(),
            "coord_errors": self.coord_errors.tolist(),
            "snapshot": None if self.snapshot is None else self.snapshot.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CrossoverEstimate":
        if data.get("format") != STATE_FORMAT:
            raise ValueError(f"not a crossover-estimate snapshot: format={data.get('format')!r}")
        if data.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported snapshot version {data.get('version')!r}")
        return cls(
            int(data["num_workers"]),
            int(data["dim"]),
            int(data["iterations"]),
            np.array(data["pooled_errors"], dtype=np.int64),
            np.array(data["coord_errors"], dtype=np.int64).reshape(data["num_workers"], data["dim"]),
            None if data["snapshot"] is None else np.array(data["snapshot"], dtype=np.float64),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def loads(cls, text: str) -> "CrossoverEstimate":
        return cls.from_dict(json.loads(text))


def fd_update(state: CrossoverEstimate, received, t: int, cfg: FdConfig,
              weight_override: LLRWeightTable | None = None):
    """One federated-defense server step.

    Decodes with the weights learned from iterations ``1 .. t-1``, tallies the
    disagreements of iteration ``t`` against that decode, and returns
    ``(decoded, new_state, new_weights)``. ``state`` is not modified.

    ``weight_override`` replaces the learned weights in the decode step only;
    the estimator still runs. It exists for testing against known weights.
    """
    if t < 1:
        raise ValueError(f"iteration index must be >= 1, got {t}")
    if state.iterations != t - 1:
        raise ValueError(f"state has observed {state.iterations} iterations, cannot apply t={t}")
    votes = stack_signs(received)
    if votes.shape != (state.num_workers, state.dim):
        raise ValueError(f"votes shape {votes.shape} != state shape {(state.num_workers, state.dim)}")

    if weight_override is not None:
        negative = decode_votes(votes, weight_override.as_matrix(state.dim))
    elif t <= cfg.initial_phase and cfg.initial_decoder == "mv":
        negative = decode_votes(votes)
    else:
        negative = decode_votes(votes, state.weights(cfg).as_matrix(state.dim))
    decoded = SignVector.from_bits(negative)

    mismatch = (votes < 0) != negative[None, :]
    new = state.copy()
    if t <= cfg.initial_phase:
        new.pooled_errors += mismatch.sum(axis=1)
        if t == cfg.initial_phase:
            new.snapshot = new.pooled_errors / (state.dim * cfg.initial_phase)
    else:
        new.coord_errors += mismatch
    new.iterations = t
    return decoded, new, new.weights(cfg)


class MajorityVote:
    name = "mv"

    def decode(self, received, t: int) -> SignVector:
        return mv_decode(received)


class OracleWMV:
    name = "oracle"

    def __init__(self, weights: LLRWeightTable):
        self.weights = weights

    def decode(self, received, t: int) -> SignVector:
        return wmv_decode(received, self.weights)


class FederatedDefense:
    """Stateful wrapper around :func:`fd_update`; one instance per run."""

    name = "fd"

    def __init__(self, num_workers: int, dim: int, cfg: FdConfig | None = None,
                 weight_override: LLRWeightTable | None = None):
        self.cfg = cfg or FdConfig()
        self.state = CrossoverEstimate(num_workers, dim)
        self.weights = self.state.weights(self.cfg)
        self.weight_override = weight_override

    def decode(self, received, t: int) -> SignVector:
        decoded, self.state, self.weights = fd_update(
            self.state, received, t, self.cfg, self.weight_override
        )
        return decoded

    def worker_crossover(self) -> np.ndarray | None:
        """Current estimate per worker, averaged over coordinates when per-coordinate."""
        p = self.state.estimate(self.cfg)
        if p is None:
            return None
        return p if p.ndim == 1 else p.mean(axis=1)


def make_aggregator(name: str, num_workers: int, dim: int, fd: FdConfig | None = None,
                    oracle_p=None):
    if name == "mv":
        return MajorityVote()
    if name == "fd":
        return FederatedDefense(num_workers, dim, fd)
    if name == "oracle":
        if oracle_p is None:
            raise ValueError("oracle aggregator needs per-worker crossover probabilities")
        return OracleWMV(oracle_weights(oracle_p))
    raise ValueError(f"unknown aggregator {name!r}; expected 'mv', 'fd' or 'oracle'")
