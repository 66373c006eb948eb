"""Distributed sign-based training loop with pluggable aggregation and attacks.

One iteration: every worker draws a mini-batch, quantizes its gradient to
signs and sends the packed vector; compromised workers' vectors are
manipulated; the server decodes one sign per coordinate and broadcasts it;
all workers take the step ``x <- x - lr * decoded``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..aggregation import FdConfig, FederatedDefense, LLRWeightTable, make_aggregator
from ..channel import AttackSpec, apply_attack
from ..core import RngStream, sign_quantize, unpack
from .data import local_gradient, partition_iid
from .tasks import TaskSpec, build_task

DIVERGENCE_FACTOR = 1e6
RUN_CSV_HEADER = ("t", "loss", "grad_l1", "decode_err_rate", "bits_up", "bits_down")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FleetConfig:
    """Worker fleet and optimizer settings. ``batch_size=None`` means full shard."""

    num_workers: int = 15
    batch_size: int | tuple | None = 64
    lr: float = 1e-3
    iterations: int = 2000
    attack: AttackSpec = field(default_factory=AttackSpec.none)
    aggregator: str = "fd"
    fd: FdConfig = field(default_factory=FdConfig)
    oracle_p: tuple | None = None
    threads: int = 1

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        for b in self.batch_sizes():
            if b is not None and b < 1:
                raise ValueError("batch sizes must be >= 1")
        self.attack.validate(self.num_workers)

    def batch_sizes(self) -> list:
        if isinstance(self.batch_size, (tuple, list)):
            if len(self.batch_size) != self.num_workers:
                raise ValueError("need one batch size per worker")
            return list(self.batch_size)
        return [self.batch_size] * self.num_workers


@dataclass(frozen=True)
class RunRecord:
    """Diagnostics of iteration ``t``, measured at the model before its update.

    ``bits_up`` and ``bits_down`` are cumulative over iterations ``1..t``.
    """

    t: int
    loss: float
    grad_l1: float
    decode_err_rate: float
    bits_up: int
    bits_down: int
    disagreement: tuple
    p_hat: tuple | None = None

    def row(self, with_p_hat: bool = False) -> list:
        out = [self.t, repr(self.loss), repr(self.grad_l1), repr(self.decode_err_rate),
               self.bits_up, self.bits_down]
        if with_p_hat:
            out.extend("" if self.p_hat is None else repr(v) for v in (self.p_hat or ()))
        return out


@dataclass
class RunResult:
    records: list
    x: np.ndarray
    final_loss: float

    @property
    def pe_max(self) -> float:
        return max(r.decode_err_rate for r in self.records)


def _aggregator_for(fleet: FleetConfig, dim: int, oracle_override):
    if fleet.aggregator == "fd" and oracle_override is not None:
        return FederatedDefense(fleet.num_workers, dim, fleet.fd, weight_override=oracle_override)
    return make_aggregator(fleet.aggregator, fleet.num_workers, dim, fleet.fd, fleet.oracle_p)


def run_experiment(task, fleet: FleetConfig, seed: int,
                   oracle_override: LLRWeightTable | None = None, result: RunResult | None = None):
    """Yield one :class:`RunRecord` per iteration.

    ``task`` is a :class:`TaskSpec` (data generated from ``seed``) or a built
    task. ``oracle_override`` injects fixed decode weights into an FD
    aggregator. If ``result`` is given it receives the final model and loss.
    """
    if isinstance(task, TaskSpec):
        task = build_task(task, seed)
    m_workers = fleet.num_workers
    root = RngStream(seed)
    shards = partition_iid(task.num_samples, m_workers, root)
    batches = fleet.batch_sizes()
    for m, (b, shard) in enumerate(zip(batches, shards)):
        if b is not None and b > len(shard):
            raise ValueError(f"worker {m}: batch size {b} exceeds shard size {len(shard)}")
    aggregator = _aggregator_for(fleet, task.dim, oracle_override)
    x = task.initial_point(root).astype(np.float64)
    initial_loss = task.loss(x)
    limit = DIVERGENCE_FACTOR * max(abs(initial_loss), 1e-12)
    bits_up = bits_down = 0
    pool = ThreadPoolExecutor(fleet.threads) if fleet.threads > 1 else None

    def worker_message(m, t, snapshot):
        g = local_gradient(task, shards[m], snapshot, batches[m], RngStream(seed, m, t, "batch"))
        return apply_attack(sign_quantize(g), m, fleet.attack, RngStream(seed, m, t, "attack"))

    try:
        for t in range(1, fleet.iterations + 1):
            loss, full_grad = task.loss_and_gradient(x)
            if not math.isfinite(loss) or loss > limit:
                raise TrainingDiverged(
                    f"loss {loss:.4g} at t={t} exceeds {DIVERGENCE_FACTOR:g} x initial loss {initial_loss:.4g}"
                )
            truth = sign_quantize(full_grad)

            snapshot = x.copy()
            snapshot.flags.writeable = False
            if pool is None:
                received = [worker_message(m, t, snapshot) for m in range(m_workers)]
            else:
                received = list(pool.map(lambda m: worker_message(m, t, snapshot), range(m_workers)))

            decoded = aggregator.decode(received, t)
            bits_up += sum(v.length for v in received)
            bits_down += decoded.length * m_workers

            p_hat = None
            if isinstance(aggregator, FederatedDefense):
                est = aggregator.worker_crossover()
                p_hat = None if est is None else tuple(float(v) for v in est)
            yield RunRecord(
                t=t,
                loss=loss,
                grad_l1=float(np.abs(full_grad).sum()),
                decode_err_rate=decoded.hamming(truth) / decoded.length,
                bits_up=bits_up,
                bits_down=bits_down,
                disagreement=tuple(v.hamming(decoded) / decoded.length for v in received),
                p_hat=p_hat,
            )
            x = x - fleet.lr * unpack(decoded)
    finally:
        if pool is not None:
            pool.shutdown()

    if result is not None:
        result.x = x
        result.final_loss = task.loss(x)


def train(task, fleet: FleetConfig, seed: int, oracle_override: LLRWeightTable | None = None) -> RunResult:
    """Run to completion and collect all records."""
    result = RunResult([], None, math.nan)
    result.records = list(run_experiment(task, fleet, seed, oracle_override, result))
    return result


def write_records(path, records, with_p_hat: bool = False, num_workers: int = 0) -> None:
    header = list(RUN_CSV_HEADER)
    if with_p_hat:
        header += [f"p_hat_{m}" for m in range(num_workers)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in records:
            row = rec.row(with_p_hat)
            if with_p_hat and rec.p_hat is None:
                row += [""] * num_workers
            writer.writerow(row)


def theorem1_lr(f1: float, f_star: float, l1_norm: float, iterations: int) -> float:
    """Fixed step size ``sqrt(2 (f1 - f*) / (T ||L||_1))`` of the convergence bound."""
    return math.sqrt(2.0 * (f1 - f_star) / (iterations * l1_norm))


@dataclass(frozen=True)
class Theorem1Report:
    iterations: int
    mean_grad_l1: float
    rhs: float
    pe_max: float
    applicable: bool

    @property
    def ratio(self) -> float:
        return self.mean_grad_l1 / self.rhs if self.applicable else math.nan

    @property
    def holds(self) -> bool | None:
        return self.mean_grad_l1 <= self.rhs if self.applicable else None


def theorem1_rhs(f1: float, f_star: float, l1_norm: float, iterations: int, pe_max: float = 0.0) -> float:
    if pe_max >= 0.5:
        return math.inf
    return math.sqrt(2.0 * (f1 - f_star) * l1_norm / iterations) / (1.0 - 2.0 * pe_max)


def theorem1_check(records, f1: float, f_star: float, l1_norm: float,
                   pe_max: float | None = None) -> Theorem1Report:
    """Compare ``mean_t ||g_t||_1`` against the convergence bound.

    ``pe_max`` defaults to the largest per-iteration decode error rate in the
    records. The bound is inapplicable when it reaches 1/2.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    if pe_max is None:
        pe_max = max(r.decode_err_rate for r in records)
    mean_l1 = float(np.mean([r.grad_l1 for r in records]))
    return Theorem1Report(
        iterations=len(records),
        mean_grad_l1=mean_l1,
        rhs=theorem1_rhs(f1, f_star, l1_norm, len(records), pe_max),
        pe_max=pe_max,
        applicable=pe_max < 0.5,
    )
