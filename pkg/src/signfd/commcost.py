"""Bit-exact communication cost of SGD, Top-K SGD and sign-based training runs.

Per iteration and worker, the uplink carries the compressed gradient and the
downlink carries the aggregated update:

    SGD      32N + 32N
    Top-K    (32K + ceil(K log2(N/K))) + 32N
    signSGD  N + N
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SCALAR_BITS = 32
ALGORITHMS = ("sgd", "topk", "signsgd")
COST_CSV_HEADER = ("algorithm", "N", "M", "T", "K", "total_bits", "bits_per_iteration")


def topk_index_bits(n: int, k: int) -> int:
    """``ceil(K log2(N/K))``; exact whenever the product is an integer."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    if n % k == 0 and (n // k) & (n // k - 1) == 0:
        return k * ((n // k).bit_length() - 1)
    value = k * math.log2(n / k)
    nearest = round(value)
    return nearest if abs(value - nearest) < 1e-9 else math.ceil(value)


@dataclass(frozen=True)
class CostModel:
    algorithm: str
    N: int
    M: int
    T: int
    K: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("N", "M", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.algorithm == "topk":
            if self.K is None:
                raise ValueError("Top-K cost needs K")
            if not 1 <= self.K <= self.N:
                raise ValueError(f"need 1 <= K <= N, got K={self.K}, N={self.N}")

    def uplink_bits(self) -> int:
        """Bits one worker sends in one iteration."""
        if self.algorithm == "sgd":
            return SCALAR_BITS * self.N
        if self.algorithm == "topk":
            return SCALAR_BITS * self.K + topk_index_bits(self.N, self.K)
        return self.N

    def downlink_bits(self) -> int:
        """Bits one worker receives in one iteration."""
        return self.N if self.algorithm == "signsgd" else SCALAR_BITS * self.N

    def bits_per_iteration(self) -> int:
        return (self.uplink_bits() + self.downlink_bits()) * self.M


def total_bits(model: CostModel) -> int:
    return model.bits_per_iteration() * model.T


def cost_row(model: CostModel) -> tuple:
    return (model.algorithm, model.N, model.M, model.T,
            "" if model.K is None else model.K, total_bits(model), model.bits_per_iteration())
