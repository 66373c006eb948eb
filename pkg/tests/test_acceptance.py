"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also collected into the terminal summary of any pytest run.
"""

import csv
import math
import time

import numpy as np
import pytest

from signfd import cli
from signfd.aggregation import FdConfig, oracle_weights
from signfd.analysis import (
    attacked_bounds,
    exact_error_probability,
    gamma_wmv,
    monte_carlo_error,
    mv_bound,
    simulate_fd_bsc,
    wmv_bound,
)
from signfd.channel import AttackSpec, effective_crossovers
from signfd.commcost import CostModel, total_bits
from signfd.core import RngStream
from signfd.training import FleetConfig, TaskSpec, build_task, train
from signfd.training.loop import theorem1_check, theorem1_lr, theorem1_rhs

SEEDS = range(5)
ROBUST_TASK = TaskSpec("logistic", dim=100, num_samples=4800, separation=0.05, noise=0.05)
ROBUST_RUNS = {
    "fd_L0": ("fd", 0, 1.0),
    "fd_L6": ("fd", 6, 1.0),
    "mv_L6": ("mv", 6, 1.0),
    "fd_L9": ("fd", 9, 1.0),
    "fd_L6_half": ("fd", 6, 0.5),
    "fd_L6_zero": ("fd", 6, 0.0),
}


def test_criterion_01_exact_mv_error(acceptance):
    start = time.perf_counter()
    p = np.full(3, 0.1)
    exact = exact_error_probability(p)
    est, _ = monte_carlo_error(p, None, 10**6, RngStream(2024, purpose="acceptance-1"))
    elapsed = time.perf_counter() - start
    sigma = math.sqrt(0.028 * 0.972 / 10**6)
    z = (est - 0.028) / sigma
    ok = abs(exact - 0.028) < 1e-15 and abs(z) <= 3 and elapsed < 1.0
    acceptance(1, ok, f"exact={exact!r} mc={est:.6f} z={z:+.2f} time={elapsed:.2f}s")


def test_criterion_02_bound_validity_grid(acceptance):
    start = time.perf_counter()
    violations = []
    for m in (3, 5, 9, 15):
        for q in (0.1, 0.2, 0.3, 0.4):
            p = np.full(m, q)
            e_mv = exact_error_probability(p)
            e_wmv = exact_error_probability(p, oracle_weights(p))
            if e_mv > mv_bound(p):
                violations.append(("mv", m, q))
            if e_wmv > wmv_bound(p):
                violations.append(("wmv", m, q))
    elapsed = time.perf_counter() - start
    acceptance(2, not violations and elapsed < 10.0,
               f"violations={violations} over 16 points time={elapsed:.2f}s")


def _sia_case(m, n_bad, q, r):
    p = np.full(m, q)
    p_eff = effective_crossovers(p, AttackSpec.first(n_bad, r))
    return p, p_eff


def test_criterion_03_sia_invariance(acceptance):
    start = time.perf_counter()
    clean = exact_error_probability(np.full(7, 0.3), oracle_weights(np.full(7, 0.3)))
    gaps = []
    for n_bad in (1, 2, 3):
        _, p_eff = _sia_case(7, n_bad, 0.3, 1.0)
        gaps.append(abs(exact_error_probability(p_eff, oracle_weights(p_eff)) - clean))
    elapsed = time.perf_counter() - start
    worst = max(gaps)
    acceptance(3, worst <= 1e-12 and elapsed < 1.0,
               f"clean={clean:.12f} max|gap|={worst:.1e} time={elapsed:.3f}s")


def test_criterion_04_half_flip_collapse(acceptance):
    start = time.perf_counter()
    gaps = []
    for n_bad in (1, 2, 3):
        _, p_eff = _sia_case(7, n_bad, 0.3, 0.5)
        attacked = exact_error_probability(p_eff, oracle_weights(p_eff))
        benign = np.full(7 - n_bad, 0.3)
        alone = exact_error_probability(benign, oracle_weights(benign))
        gaps.append(abs(attacked - alone))
    elapsed = time.perf_counter() - start
    worst = max(gaps)
    acceptance(4, worst <= 1e-12 and elapsed < 1.0, f"max|gap|={worst:.1e} time={elapsed:.3f}s")


def test_criterion_05_closed_forms_and_monotone_exponent(acceptance):
    rel_err = 0.0
    monotone_breaks = []
    r_grid = np.linspace(0.0, 1.0, 21)
    for m in (3, 5, 9, 15):
        for q in (0.1, 0.2, 0.3, 0.4):
            p = np.full(m, q)
            g = gamma_wmv(p)
            for n_bad in range(1, m):
                sia = attacked_bounds(p, AttackSpec.first(n_bad, 1.0))
                half = attacked_bounds(p, AttackSpec.first(n_bad, 0.5))
                pairs = [
                    (sia.gamma_wmv_attacked, m * g / (m - n_bad)),
                    (sia.fd_bound, math.exp(-m * g)),
                    (half.gamma_wmv_attacked, g),
                    (half.fd_bound, math.exp(-(m - n_bad) * g)),
                ]
                for got, want in pairs:
                    rel_err = max(rel_err, abs(got - want) / abs(want))
                reports = [attacked_bounds(p, AttackSpec.first(n_bad, float(r))) for r in r_grid]
                valid = [rep.mv_exponent for rep in reports if rep.mv_valid]
                if any(b > a + 1e-12 * max(1.0, abs(a)) for a, b in zip(valid, valid[1:])):
                    monotone_breaks.append((m, q, n_bad))
    ok = rel_err <= 1e-13 and not monotone_breaks
    acceptance(5, ok, f"max rel err={rel_err:.1e} monotonicity breaks={monotone_breaks}")


def test_criterion_06_estimator_learns_adversaries(acceptance):
    start = time.perf_counter()
    cfg = FdConfig(initial_phase=50)
    spec = AttackSpec.first(6, 1.0)
    p = np.full(15, 0.3)
    expected = np.where(spec.mask(15), -1.0, 1.0)[:, None]
    good_seeds = 0
    for seed in range(20):
        state = {"ok": True}

        def on_step(t, truth, votes, decoded, fd):
            # weights produced at step t are the ones used to decode step t + 1
            if t >= cfg.initial_phase and state["ok"]:
                w = fd.weights.as_matrix(64)
                state["ok"] = bool(np.all(np.sign(w) == expected))

        simulate_fd_bsc(p, spec, 64, 2000, cfg, seed, on_step)
        good_seeds += state["ok"]
    elapsed = time.perf_counter() - start
    acceptance(6, good_seeds >= 19 and elapsed < 30.0,
               f"seeds with all weight signs correct={good_seeds}/20 time={elapsed:.1f}s")


@pytest.fixture(scope="module")
def robust_losses():
    losses = {}
    timings = {}
    for name, (agg, n_bad, r) in ROBUST_RUNS.items():
        start = time.perf_counter()
        fleet = FleetConfig(15, 64, 1e-3, 2000, AttackSpec.first(n_bad, r), agg)
        losses[name] = np.array([train(ROBUST_TASK, fleet, s).final_loss for s in SEEDS])
        timings[name] = time.perf_counter() - start
    return losses, timings


@pytest.mark.slow
def test_criterion_07_desk_scale_robustness(acceptance, robust_losses):
    losses, timings = robust_losses
    elapsed = sum(timings[k] for k in ("fd_L0", "fd_L6", "mv_L6", "fd_L9"))
    clean, fd6, mv6, fd9 = losses["fd_L0"], losses["fd_L6"], losses["mv_L6"], losses["fd_L9"]
    gap = float(np.mean(np.abs(fd6 - clean) / clean))
    a = gap <= 0.05
    b = bool(np.all(mv6 > fd6))
    c = bool(np.all(fd9 > 1.25 * clean))
    detail = (f"(a) mean rel gap={gap:.4f} (b) mv>fd seeds={int(np.sum(mv6 > fd6))}/5 "
              f"(c) min fd9/clean={float(np.min(fd9 / clean)):.2f} time={elapsed:.0f}s")
    acceptance(7, a and b and c and elapsed < 300.0, detail)


@pytest.mark.slow
def test_criterion_08_half_flip_is_worst_case(acceptance, robust_losses):
    losses, _ = robust_losses
    half, sia, zero = losses["fd_L6_half"], losses["fd_L6"], losses["fd_L6_zero"]
    wins = int(np.sum((half >= sia) & (half >= zero)))
    detail = (f"seeds with r=1/2 worst={wins}/5 mean losses r=0:{zero.mean():.4f} "
              f"r=1/2:{half.mean():.4f} r=1:{sia.mean():.4f}")
    acceptance(8, wins >= 4, detail)


def test_criterion_09_theorem1_hard_check(acceptance):
    task = build_task(TaskSpec("quadratic", dim=20, num_samples=10, noise=0.0), 7)
    f1 = task.loss(np.zeros(task.dim))
    l1 = float(task.smoothness.sum())
    ratios = {}
    holds = True
    for t in (100, 400, 1600):
        lr = theorem1_lr(f1, task.f_star, l1, t)
        fleet = FleetConfig(num_workers=1, batch_size=None, lr=lr, iterations=t, aggregator="mv")
        rep = theorem1_check(train(task, fleet, 7).records, f1, task.f_star, l1)
        plain_rhs = math.sqrt(2 * (f1 - task.f_star) * l1 / t)
        holds &= rep.pe_max == 0.0 and rep.mean_grad_l1 <= plain_rhs and rep.rhs == plain_rhs
        ratios[t] = rep.mean_grad_l1 / plain_rhs
    half = theorem1_rhs(f1, task.f_star, l1, 1600) / theorem1_rhs(f1, task.f_star, l1, 400)
    ok = holds and abs(half - 0.5) <= 1e-15
    acceptance(9, ok, f"LHS/RHS={ {t: round(v, 4) for t, v in ratios.items()} } RHS(1600)/RHS(400)={half!r}")


def test_criterion_10_communication_cost(acceptance):
    n, m, t, k = 10**5, 15, 10**3, 10**4
    table = {
        "sgd": total_bits(CostModel("sgd", n, m, t)),
        "topk": total_bits(CostModel("topk", n, m, t, K=k)),
        "signsgd": total_bits(CostModel("signsgd", n, m, t)),
    }
    index = math.ceil(k * math.log2(n / k))
    want = {
        "sgd": 64 * n * m * t,
        "topk": (32 * k + index + 32 * n) * m * t,
        "signsgd": 2 * n * m * t,
    }
    ratio_ok = table["sgd"] == 32 * table["signsgd"]
    spec = TaskSpec("logistic", dim=30, num_samples=900, separation=0.5, noise=0.5)
    prefix_ok = True
    for agg, n_bad in (("mv", 0), ("fd", 4)):
        fleet = FleetConfig(num_workers=9, batch_size=16, lr=1e-3, iterations=40,
                            attack=AttackSpec.first(n_bad, 1.0), aggregator=agg)
        for rec in train(spec, fleet, 1).records:
            prefix_ok &= rec.bits_up + rec.bits_down == total_bits(CostModel("signsgd", 30, 9, rec.t))
    ok = table == want and table["topk"] == 53_298_300_000 and ratio_ok and prefix_ok
    acceptance(10, ok, f"table={table} sgd==32*sign={ratio_ok} prefixes match={prefix_ok}")


DETERMINISM_CONFIGS = {
    "train": """\
mode: train
seeds: [0, 1]
task: {family: logistic, dim: 40, num_samples: 1500, separation: 0.3, noise: 0.5}
fleet: {num_workers: 15, batch_size: 64, lr: 0.001, iterations: 60, aggregators: [mv, fd], record_p_hat: true}
attack: {L: [0, 6], r: [1.0, 0.5]}
""",
    "channel-validate": """\
mode: channel-validate
seeds: [4]
channel: {M: [7, 15], p: [0.2], L: [0, 3], r: [1.0], dim: 16, iterations: 200}
""",
    "bounds-table": """\
mode: bounds-table
seeds: [5]
bounds: {M: [3, 5], p: [0.2], r: [0.5, 1.0], L: [0, 1], trials: 5000}
""",
}


def _data_rows(path):
    with open(path, newline="") as fh:
        return fh.read().splitlines()[1:]


def test_criterion_11_determinism(acceptance, tmp_path, capsys):
    mismatched = []
    compared = 0
    for mode, text in DETERMINISM_CONFIGS.items():
        cfg = tmp_path / f"{mode}.yaml"
        cfg.write_text(text)
        outs = [tmp_path / f"{mode}-{i}" for i in range(2)]
        codes = [cli.main(["--config", str(cfg), "--out", str(out)]) for out in outs]
        if codes != [0, 0]:
            mismatched.append((mode, "exit", codes, capsys.readouterr().err))
            continue
        for path in sorted(outs[0].glob("*.csv")):
            compared += 1
            first = _data_rows(path)
            if not first or first != _data_rows(outs[1] / path.name):
                mismatched.append((mode, path.name))
    acceptance(11, compared > 0 and not mismatched,
               f"csv files compared={compared} mismatches={mismatched}")
