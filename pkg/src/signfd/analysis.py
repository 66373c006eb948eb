"""Decoding-error exponents, closed-form upper bounds and exact/Monte Carlo error rates.

All probabilities here are per-coordinate crossover probabilities of the
workers' effective channels. With ``g(p) = 0.5 (0.5 - p) ln((1 - p)/p)``:

* weighted majority with LLR weights: ``P_E <= exp(-M c gamma_wmv)`` with
  ``gamma_wmv = mean g(p)`` and ``c = (1 - delta_min)/(1 + delta_max)``,
* plain majority: ``P_E <= exp(-M gamma_mv)`` with
  ``gamma_mv = pbar - 0.5 ln(2 e pbar)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .aggregation import FdConfig, FederatedDefense, LLRWeightTable, oracle_weights
from .channel import AttackSpec, effective_crossover, effective_crossovers
from .core import RngStream

BOUNDS_CSV_HEADER = ("M", "L", "r", "p", "decoder", "bound", "exact", "mc_estimate", "mc_stderr")

MAX_ENUMERATION = 1 << 25


def _open_probabilities(p) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty 1-d array of probabilities")
    if not np.all(np.isfinite(p)) or np.any((p <= 0) | (p >= 1)):
        raise ValueError(f"probabilities must lie strictly inside (0, 1), got {p.tolist()}")
    return p


def g_exponent(p):
    """Per-worker weighted-majority exponent ``0.5 (0.5 - p) ln((1 - p)/p)``."""
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any((arr <= 0) | (arr >= 1)):
        raise ValueError(f"g(p) needs p strictly inside (0, 1), got {p!r}")
    out = 0.5 * (0.5 - arr) * (np.log1p(-arr) - np.log(arr))
    return float(out) if out.ndim == 0 else out


def gamma_wmv(p) -> float:
    return float(np.mean(g_exponent(_open_probabilities(p))))


def gamma_mv(p) -> float:
    pbar = float(np.mean(_open_probabilities(p)))
    return pbar - 0.5 * math.log(2.0 * math.e * pbar)


@dataclass(frozen=True)
class WeightUncertainty:
    """Bounds ``1 - delta_min <= w_hat / w <= 1 + delta_max`` on the estimated weights."""

    delta_min: float = 0.0
    delta_max: float = 0.0

    def __post_init__(self):
        if self.delta_min < 0 or self.delta_max < 0:
            raise ValueError("delta_min and delta_max must be non-negative")

    @property
    def factor(self) -> float:
        return (1.0 - self.delta_min) / (1.0 + self.delta_max)


def wmv_bound(p, unc: WeightUncertainty = WeightUncertainty()) -> float:
    p = _open_probabilities(p)
    return math.exp(-p.size * unc.factor * gamma_wmv(p))


def mv_bound(p) -> float:
    p = _open_probabilities(p)
    return math.exp(-p.size * gamma_mv(p))


@dataclass(frozen=True)
class ExponentReport:
    """Exponents and bounds for one attacked configuration.

    ``mv_exponent`` is the full exponent ``(M - 2rL) * gamma_mv_attacked``; it
    stays defined when ``M == 2rL`` where ``gamma_mv_attacked`` is NaN.
    """

    num_workers: int
    num_compromised: int
    flip_prob: float
    gamma_wmv: float
    gamma_mv: float
    gamma_wmv_attacked: float
    gamma_mv_attacked: float
    epsilon: float
    mv_exponent: float
    factor: float
    wmv_bound: float
    mv_bound: float
    fd_bound: float
    mv_attacked_bound: float
    mv_valid: bool

    @property
    def fd_vacuous(self) -> bool:
        return self.fd_bound >= 1.0

    @property
    def mv_vacuous(self) -> bool:
        """True when the bound is >= 1 or its derivation does not apply (mean crossover >= 1/2)."""
        return self.mv_attacked_bound >= 1.0 or not self.mv_valid


def mv_epsilon(p, spec: AttackSpec) -> float:
    """Correction term of the attacked MV exponent.

    ``-(M/2) ln(ptilde/pbar) - r L ln(pbar_L / (1/2))``, zero without compromised workers.
    """
    p = _open_probabilities(p)
    mask = spec.mask(p.size)
    if not mask.any():
        return 0.0
    r = spec.flip_prob
    pbar = p.mean()
    ptilde = effective_crossovers(p, spec).mean()
    pbar_l = p[mask].mean()
    return -(p.size / 2.0) * math.log(ptilde / pbar) - r * mask.sum() * math.log(pbar_l / 0.5)


def attacked_bounds(p, spec: AttackSpec, unc: WeightUncertainty = WeightUncertainty()) -> ExponentReport:
    """Error exponents and bounds for FD and MV decoding under a sign-flip attack."""
    p = _open_probabilities(p)
    m = p.size
    mask = spec.mask(m)
    n_bad = int(mask.sum())
    if n_bad >= m:
        raise ValueError(f"need fewer compromised workers than workers (L={n_bad}, M={m})")
    r = float(spec.flip_prob)

    g_wmv = gamma_wmv(p)
    g_mv = gamma_mv(p)
    if n_bad:
        g_tilde = g_exponent(effective_crossover(p[mask], r))
        g_l = gamma_wmv(p[mask])
        g_mv_l = gamma_mv(p[mask])
        fd_total = m * g_wmv - n_bad * g_l + float(np.sum(g_tilde))
    else:
        g_l = g_mv_l = 0.0
        fd_total = m * g_wmv
    gamma_fd = fd_total / (m - n_bad)

    eps = mv_epsilon(p, spec)
    mv_total = m * g_mv - 2.0 * r * n_bad * g_mv_l + eps
    scale = m - 2.0 * r * n_bad
    gamma_mv_att = mv_total / scale if scale != 0 else math.nan
    p_tilde_mean = float(effective_crossovers(p, spec).mean())

    return ExponentReport(
        num_workers=m,
        num_compromised=n_bad,
        flip_prob=r,
        gamma_wmv=g_wmv,
        gamma_mv=g_mv,
        gamma_wmv_attacked=gamma_fd,
        gamma_mv_attacked=gamma_mv_att,
        epsilon=eps,
        mv_exponent=mv_total,
        factor=unc.factor,
        wmv_bound=math.exp(-m * unc.factor * g_wmv),
        mv_bound=math.exp(-m * g_mv),
        fd_bound=math.exp(-(m - n_bad) * unc.factor * gamma_fd),
        mv_attacked_bound=math.exp(-mv_total),
        mv_valid=p_tilde_mean < 0.5,
    )


def _weight_vector(weights, m: int) -> np.ndarray:
    if weights is None:
        return np.ones(m)
    if isinstance(weights, LLRWeightTable):
        if weights.per_coordinate:
            raise ValueError("exact error needs one weight per worker")
        w = np.asarray(weights.weights, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ValueError(f"expected {m} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    return w


def _poisson_binomial(p: np.ndarray) -> np.ndarray:
    dist = np.zeros(p.size + 1)
    dist[0] = 1.0
    for k, pk in enumerate(p, start=1):
        dist[1:k + 1] = dist[1:k + 1] * (1 - pk) + dist[0:k] * pk
        dist[0] *= 1 - pk
    return dist


def _binomial_pmf(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    coef = np.array([math.comb(n, int(i)) for i in k], dtype=np.float64)
    return coef * p ** k * (1.0 - p) ** (n - k)


def exact_error_probability(p, weights=None) -> float:
    """Exact single-coordinate decoding error ``P[U_hat != U]``.

    ``p`` holds the effective crossover of each worker (``0 <= p <= 1``) and
    ``weights`` the decoding weights (``None`` means plain majority). The
    message sign is uniform on {-1, +1}; ties decode to +1, so a tie is an
    error only when ``U = -1``. This gives ``P[S < 0] + P[S = 0] / 2`` where
    ``S = sum_m w_m X_m`` and ``X_m = -1`` with probability ``p_m``.

    Workers with identical ``(weight, p)`` are grouped and their flip counts
    enumerated binomially; equal weights reduce to a Poisson-binomial count.
    Sums within rounding error of zero count as ties.
    """
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty 1-d array of probabilities")
    if not np.all(np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    m = p.size
    w = _weight_vector(weights, m)

    if np.all(w == w[0]):
        if w[0] == 0:
            return 0.5
        dist = _poisson_binomial(p)
        k = np.arange(m + 1)
        # S = w0 (M - 2k): negative when k > M/2 for w0 > 0, when k < M/2 for w0 < 0
        wrong = (k > m / 2) if w[0] > 0 else (k < m / 2)
        tie = 2 * k == m
        return float(math.fsum(dist[wrong]) + 0.5 * math.fsum(dist[tie]))

    groups: dict[tuple[float, float], int] = {}
    for wi, pi in zip(w.tolist(), p.tolist()):
        groups[(wi, pi)] = groups.get((wi, pi), 0) + 1
    keys = list(groups)
    sizes = [groups[k] for k in keys]
    combos = math.prod(n + 1 for n in sizes)
    if combos > MAX_ENUMERATION:
        raise ValueError(
            f"exact enumeration needs {combos} outcome classes (limit {MAX_ENUMERATION}); "
            "use monte_carlo_error instead"
        )

    # per-group flip-count pmf and contribution w * (n - 2k), combined by outer sums
    prob = np.ones(1)
    total = np.zeros(1)
    scale = np.zeros(1)
    for (wg, pg), n in zip(keys, sizes):
        k = np.arange(n + 1)
        contrib = wg * (n - 2 * k)
        prob = np.multiply.outer(prob, _binomial_pmf(n, pg)).ravel()
        total = np.add.outer(total, contrib).ravel()
        scale = np.add.outer(scale, np.abs(contrib)).ravel()
    tie = np.abs(total) <= 1e-12 * np.maximum(scale, 1e-300)
    wrong = (total < 0) & ~tie
    return float(math.fsum(prob[wrong]) + 0.5 * math.fsum(prob[tie]))


def monte_carlo_error(p, weights, trials: int, rng: RngStream, chunk: int = 1 << 16):
    """Monte Carlo decode-error rate with its binomial standard error.

    Each chunk of trials draws from its own derived stream, so results do not
    depend on how chunks are scheduled.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    m = p.size
    w = _weight_vector(weights, m)
    errors = 0
    done = 0
    for c in itertools.count():
        if done >= trials:
            break
        size = min(chunk, trials - done)
        gen = rng.child(iteration=c, purpose="monte-carlo").generator()
        truth = np.where(gen.random(size) < 0.5, -1, 1)
        flips = gen.random((size, m)) < p
        votes = np.where(flips, -truth[:, None], truth[:, None])
        decoded = np.where(votes @ w < 0, -1, 1)
        errors += int(np.count_nonzero(decoded != truth))
        done += size
    est = errors / trials
    return est, math.sqrt(est * (1.0 - est) / trials)


def weight_ratio_deltas(estimated: LLRWeightTable, true_p) -> tuple[float, float]:
    """Observed ``(delta_min, delta_max)`` of ``w_hat / w`` against true weights.

    Workers with ``p = 1/2`` (true weight 0) have an undefined ratio and are skipped.
    """
    w = oracle_weights(true_p).weights
    if estimated.per_coordinate and w.ndim == 1:
        w = w[:, None]
    w = np.broadcast_to(w, estimated.weights.shape)
    defined = w != 0
    ratio = estimated.weights[defined] / w[defined]
    if ratio.size == 0:
        return math.nan, math.nan
    return max(0.0, 1.0 - float(ratio.min())), max(0.0, float(ratio.max()) - 1.0)


def bounds_rows(M_grid, p_grid, r_grid, L_grid, trials: int, seed: int):
    """Rows of the bounds table (see ``BOUNDS_CSV_HEADER``), skipping ``L >= M``.

    For each grid point two decoders are reported: ``mv`` (plain majority,
    attacked MV bound) and ``fd`` (LLR weights of the effective crossovers,
    attacked FD bound with exact weights).
    """
    rows = []
    point = 0
    for m in M_grid:
        for n_bad in L_grid:
            if n_bad >= m:
                continue
            for r in r_grid:
                if n_bad == 0 and r != r_grid[0]:
                    continue
                for p in p_grid:
                    spec = AttackSpec.first(n_bad, r)
                    probs = np.full(m, float(p))
                    report = attacked_bounds(probs, spec)
                    p_eff = effective_crossovers(probs, spec)
                    fd_w = oracle_weights(p_eff)
                    fd_w_vec = np.where(np.isclose(p_eff, 0.5, rtol=0, atol=1e-15), 0.0, fd_w.weights)
                    for decoder, bound, weights in (
                        ("mv", report.mv_attacked_bound, None),
                        ("fd", report.fd_bound, fd_w_vec),
                    ):
                        exact = exact_error_probability(p_eff, weights)
                        stream = RngStream(seed, worker=point, purpose=f"bounds-{decoder}")
                        est, se = monte_carlo_error(p_eff, weights, trials, stream)
                        rows.append((m, n_bad, r, p, decoder, bound, exact, est, se))
                    point += 1
    return rows


def simulate_fd_bsc(p, spec: AttackSpec, dim: int, iterations: int, cfg: FdConfig, seed: int,
                    on_step=None) -> FederatedDefense:
    """Drive the FD estimator with stationary BSC workers and a uniform random message.

    Each iteration draws the message, the channel flips of all workers and the
    attack flips from three streams keyed by ``(seed, t)``. ``on_step(t, truth,
    votes, decoded, aggregator)`` is called after every decode with the
    message and the ``(M, N)`` received vote matrix as int8 arrays.
    """
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    bad = spec.mask(m)
    fd = FederatedDefense(m, dim, cfg)
    for t in range(1, iterations + 1):
        truth = np.where(RngStream(seed, 0, t, "truth").random(dim) < 0.5, -1, 1).astype(np.int8)
        flips = RngStream(seed, 0, t, "bsc").random((m, dim)) < p[:, None]
        if bad.any() and spec.flip_prob > 0:
            if spec.flip_prob == 1.0:
                flips[bad] = ~flips[bad]
            else:
                attack = RngStream(seed, 0, t, "attack").random((int(bad.sum()), dim)) < spec.flip_prob
                flips[bad] ^= attack
        votes = np.where(flips, -truth, truth).astype(np.int8)
        decoded = fd.decode(votes, t)
        if on_step is not None:
            on_step(t, truth, votes, decoded, fd)
    return fd
