"""Experiment runner.

Usage::

    signfd --config experiment.yaml [--mode MODE] [--seed SEED] [--out DIR]

The config is a YAML mapping. Section keys mirror the library's dataclass
fields::

    mode: train                  # channel-validate | train | bounds-table | cost-table
    seeds: [0, 1, 2]
    out: runs/example            # --out overrides
    task:    {family: logistic, dim: 100, num_samples: 4800, separation: 0.05, noise: 0.05}
    fleet:   {num_workers: 15, batch_size: 64, lr: 0.001, iterations: 2000,
              aggregators: [mv, fd], threads: 1, record_p_hat: false}
    fd:      {initial_phase: 50, initial_weight: 1.0, initial_decoder: wmv}
    attack:  {L: [0, 6], r: [1.0]}
    channel: {M: [15], p: [0.3], L: [6], r: [1.0], dim: 64, iterations: 2000}
    bounds:  {M: [3, 15], p: [0.1, 0.3], L: [0, 6], r: [0.0, 0.5, 1.0], trials: 100000}
    cost:    {N: 100000, M: 15, T: 1000, K: [10000], algorithms: [sgd, topk, signsgd]}

Every run writes ``manifest.json`` (resolved config, versions, seeds,
timestamps) next to its CSV files. CSV payloads carry no timestamps, so a
re-run with the same config and seed reproduces them byte for byte.

On failure the exit status is nonzero and stderr carries a single JSON
object ``{"error": category, "message": ..., "field": ...}``. If the failure
happens after outputs were started, a ``FAILED`` marker file is left in the
output directory beside the partial CSVs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .aggregation import FdConfig, decode_votes, oracle_weights
from .analysis import BOUNDS_CSV_HEADER, bounds_rows, exact_error_probability, simulate_fd_bsc
from .channel import AttackSpec, effective_crossovers
from .commcost import ALGORITHMS, COST_CSV_HEADER, CostModel, cost_row
from .training.loop import RUN_CSV_HEADER, FleetConfig, RunResult, TrainingDiverged, run_experiment
from .training.tasks import TaskSpec

CSV_SCHEMA_VERSION = 1
MODES = ("channel-validate", "train", "bounds-table", "cost-table")
THREADS_ENV = "SIGNFD_THREADS"
FAILED_MARKER = "FAILED"

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

CHANNEL_CSV_HEADER = (
    "M", "L", "r", "p", "seed", "p_eff_compromised", "flip_rate_benign", "flip_rate_compromised",
    "flip_z_compromised", "fd_weight_sign_accuracy", "fd_decode_err", "mv_decode_err",
    "oracle_exact_err",
)
TRAIN_SUMMARY_HEADER = ("aggregator", "L", "r", "seed", "status", "iterations", "final_loss", "file")
AGGREGATORS = ("mv", "fd", "oracle")


class CliError(Exception):
    category = "runtime"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def payload(self) -> dict:
        out = {"error": self.category, "message": str(self)}
        if self.field is not None:
            out["field"] = self.field
        return out


class ConfigError(CliError):
    category = "config"
    exit_code = EXIT_CONFIG


class OutputError(CliError):
    category = "io"
    exit_code = EXIT_IO


# ---------------------------------------------------------------- config schema

def _int(value, field):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{field} must be an integer, got {value!r}", field)
    return value


def _pos_int(value, field):
    value = _int(value, field)
    if value < 1:
        raise ConfigError(f"{field} must be >= 1, got {value}", field)
    return value


def _nonneg_int(value, field):
    value = _int(value, field)
    if value < 0:
        raise ConfigError(f"{field} must be >= 0, got {value}", field)
    return value


def _float(value, field):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field} must be a number, got {value!r}", field)
    return float(value)


def _prob(value, field):
    value = _float(value, field)
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{field} must lie in [0, 1], got {value}", field)
    return value


def _bool(value, field):
    if not isinstance(value, bool):
        raise ConfigError(f"{field} must be true or false, got {value!r}", field)
    return value


def _str(value, field):
    if not isinstance(value, str):
        raise ConfigError(f"{field} must be a string, got {value!r}", field)
    return value


def _list_of(item):
    def convert(value, field):
        if not isinstance(value, list):
            value = [value]
        if not value:
            raise ConfigError(f"{field} must not be empty", field)
        return [item(v, f"{field}[{i}]") for i, v in enumerate(value)]
    return convert


def _choice(options):
    def convert(value, field):
        value = _str(value, field)
        if value not in options:
            raise ConfigError(f"{field} must be one of {list(options)}, got {value!r}", field)
        return value
    return convert


def _optional(convert):
    def wrapped(value, field):
        return None if value is None else convert(value, field)
    return wrapped


def _batch(value, field):
    if value is None:
        return None
    if isinstance(value, list):
        return tuple(_pos_int(v, f"{field}[{i}]") for i, v in enumerate(value))
    return _pos_int(value, field)


def _u64(value, field):
    value = _int(value, field)
    if not 0 <= value < 2**64:
        raise ConfigError(f"{field} must be an unsigned 64-bit integer, got {value}", field)
    return value


SCHEMA = {
    "task": {
        "family": _choice(("quadratic", "logistic", "mlp")),
        "dim": _pos_int,
        "num_samples": _pos_int,
        "noise": _float,
        "separation": _float,
        "hidden": _pos_int,
        "curvature": _optional(_list_of(_float)),
        "center_scale": _float,
        "loss_scale": _float,
        "data_seed": _optional(_u64),
        "images_path": _optional(_str),
        "labels_path": _optional(_str),
        "positive_labels": _list_of(_int),
    },
    "fleet": {
        "num_workers": _pos_int,
        "batch_size": _batch,
        "lr": _float,
        "iterations": _pos_int,
        "aggregators": _list_of(_choice(AGGREGATORS)),
        "oracle_p": _optional(_list_of(_prob)),
        "threads": _pos_int,
        "record_p_hat": _bool,
    },
    "fd": {
        "initial_phase": _pos_int,
        "initial_weight": _float,
        "estimator_policy": _choice(("two-phase",)),
        "initial_decoder": _choice(("wmv", "mv")),
    },
    "attack": {
        "L": _list_of(_nonneg_int),
        "r": _list_of(_prob),
    },
    "channel": {
        "M": _list_of(_pos_int),
        "p": _list_of(_prob),
        "L": _list_of(_nonneg_int),
        "r": _list_of(_prob),
        "dim": _pos_int,
        "iterations": _pos_int,
    },
    "bounds": {
        "M": _list_of(_pos_int),
        "p": _list_of(_prob),
        "L": _list_of(_nonneg_int),
        "r": _list_of(_prob),
        "trials": _pos_int,
    },
    "cost": {
        "N": _list_of(_pos_int),
        "M": _list_of(_pos_int),
        "T": _list_of(_pos_int),
        "K": _list_of(_pos_int),
        "algorithms": _list_of(_choice(ALGORITHMS)),
    },
}

DEFAULTS = {
    "task": {k: v for k, v in dataclasses.asdict(TaskSpec()).items()},
    "fleet": {"num_workers": 15, "batch_size": 64, "lr": 1e-3, "iterations": 2000,
              "aggregators": ["mv", "fd"], "oracle_p": None, "threads": 1, "record_p_hat": False},
    "fd": {k: v for k, v in dataclasses.asdict(FdConfig()).items()},
    "attack": {"L": [0], "r": [1.0]},
    "channel": {"M": [15], "p": [0.3], "L": [6], "r": [1.0], "dim": 64, "iterations": 2000},
    "bounds": {"M": [3, 5, 9, 15], "p": [0.1, 0.2, 0.3, 0.4], "L": [0], "r": [1.0], "trials": 100000},
    "cost": {"N": [100000], "M": [15], "T": [1000], "K": [10000], "algorithms": list(ALGORITHMS)},
}
DEFAULTS["task"]["positive_labels"] = list(DEFAULTS["task"]["positive_labels"])
TOP_LEVEL = ("mode", "seeds", "out") + tuple(SCHEMA)


def resolve_config(raw) -> dict:
    """Validate a parsed config and fill in defaults; raises :class:`ConfigError`."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key {key!r}", str(key))
    resolved = {
        "mode": _choice(MODES)(raw.get("mode", "train"), "mode"),
        "seeds": _list_of(_u64)(raw.get("seeds", [0]), "seeds"),
        "out": _optional(_str)(raw.get("out"), "out"),
    }
    for section, fields in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be a mapping", section)
        values = dict(DEFAULTS[section])
        for key, value in given.items():
            name = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(f"unknown key {name!r}", name)
            values[key] = fields[key](value, name)
        resolved[section] = values
    _check_consistency(resolved)
    return resolved


def _task_spec(cfg) -> TaskSpec:
    values = dict(cfg["task"])
    for key in ("curvature", "positive_labels"):
        if values[key] is not None:
            values[key] = tuple(values[key])
    try:
        return TaskSpec(**values)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}", "task") from None


def _fd_config(cfg) -> FdConfig:
    try:
        return FdConfig(**cfg["fd"])
    except ValueError as exc:
        raise ConfigError(f"fd: {exc}", "fd") from None


def _check_consistency(cfg) -> None:
    mode = cfg["mode"]
    _fd_config(cfg)
    if mode == "train":
        _task_spec(cfg)
        fleet = cfg["fleet"]
        for key in ("images_path", "labels_path"):
            path = cfg["task"][key]
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"task.{key}: no such file {path!r}", f"task.{key}")
        m = fleet["num_workers"]
        for n_bad in cfg["attack"]["L"]:
            if n_bad > m:
                raise ConfigError(f"attack.L value {n_bad} exceeds fleet.num_workers {m}", "attack.L")
        if isinstance(fleet["batch_size"], tuple) and len(fleet["batch_size"]) != m:
            raise ConfigError("fleet.batch_size needs one entry per worker", "fleet.batch_size")
        if "oracle" in fleet["aggregators"]:
            if fleet["oracle_p"] is None or len(fleet["oracle_p"]) != m:
                raise ConfigError("the oracle aggregator needs fleet.oracle_p with one entry per worker",
                                  "fleet.oracle_p")
        if not fleet["lr"] > 0:
            raise ConfigError("fleet.lr must be positive", "fleet.lr")
    elif mode == "channel-validate":
        ch = cfg["channel"]
        for n_bad in ch["L"]:
            if n_bad >= min(ch["M"]):
                raise ConfigError(f"channel.L value {n_bad} must be below every channel.M", "channel.L")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}", "config") from None
    return raw


# ---------------------------------------------------------------- outputs

def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


class CsvSink:
    """Line-buffered CSV writer so partial results survive a crash."""

    def __init__(self, path: Path, header):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self.write(header)

    def write(self, row) -> None:
        self._writer.writerow([_cell(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _versions() -> dict:
    return {"signfd": __version__, "numpy": np.__version__, "pyyaml": yaml.__version__,
            "python": platform.python_version()}


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _r_tag(r: float) -> str:
    return repr(float(r)).replace(".", "p")


# ---------------------------------------------------------------- modes

def _attack_grid(levels, rates):
    """(L, r) pairs; ``L = 0`` is emitted once since r is then irrelevant."""
    for n_bad in levels:
        for i, r in enumerate(rates):
            if n_bad == 0 and i:
                continue
            yield n_bad, (0.0 if n_bad == 0 else r)


def run_train(cfg, out: Path, threads: int) -> list:
    task = _task_spec(cfg)
    fd = _fd_config(cfg)
    fl = cfg["fleet"]
    files = ["train_summary.csv"]
    with CsvSink(out / "train_summary.csv", TRAIN_SUMMARY_HEADER) as summary:
        for seed in cfg["seeds"]:
            for agg in fl["aggregators"]:
                for n_bad, r in _attack_grid(cfg["attack"]["L"], cfg["attack"]["r"]):
                    fleet = FleetConfig(
                        num_workers=fl["num_workers"], batch_size=fl["batch_size"], lr=fl["lr"],
                        iterations=fl["iterations"], attack=AttackSpec.first(n_bad, r),
                        aggregator=agg, fd=fd,
                        oracle_p=None if fl["oracle_p"] is None else tuple(fl["oracle_p"]),
                        threads=threads,
                    )
                    name = f"train_{agg}_L{n_bad}_r{_r_tag(r)}_seed{seed}.csv"
                    files.append(name)
                    status, last, loss = _train_one(task, fleet, seed, out / name,
                                                    fl["record_p_hat"] and agg == "fd")
                    summary.write((agg, n_bad, r, seed, status, last, loss, name))
    return files


def _train_one(task, fleet, seed, path, with_p_hat):
    header = list(RUN_CSV_HEADER)
    if with_p_hat:
        header += [f"p_hat_{m}" for m in range(fleet.num_workers)]
    result = RunResult([], None, float("nan"))
    last = 0
    with CsvSink(path, header) as sink:
        try:
            for rec in run_experiment(task, fleet, seed, result=result):
                row = rec.row(with_p_hat)
                if with_p_hat and rec.p_hat is None:
                    row += [""] * fleet.num_workers
                sink.write(row)
                last = rec.t
        except TrainingDiverged:
            return "diverged", last, float("nan")
    return "ok", last, result.final_loss


def run_channel(cfg, out: Path) -> list:
    ch = cfg["channel"]
    fd_cfg = _fd_config(cfg)
    with CsvSink(out / "channel.csv", CHANNEL_CSV_HEADER) as sink:
        for seed in cfg["seeds"]:
            for m in ch["M"]:
                for n_bad, r in _attack_grid(ch["L"], ch["r"]):
                    for p in ch["p"]:
                        sink.write(_channel_row(m, n_bad, r, p, seed, ch["dim"], ch["iterations"], fd_cfg))
    return ["channel.csv"]


def _channel_row(m, n_bad, r, p, seed, dim, iterations, fd_cfg):
    spec = AttackSpec.first(n_bad, r)
    probs = np.full(m, float(p))
    p_eff = effective_crossovers(probs, spec)
    bad = spec.mask(m)
    flips = np.zeros(m, dtype=np.int64)
    errors = {"fd": 0, "mv": 0}

    def on_step(t, truth, votes, decoded, fd):
        flips[:] += (votes != truth).sum(axis=1)
        errors["fd"] += int(np.count_nonzero(decoded.to_signs() != truth))
        mv_neg = decode_votes(votes)
        errors["mv"] += int(np.count_nonzero(mv_neg != (truth < 0)))

    fd = simulate_fd_bsc(probs, spec, dim, iterations, fd_cfg, seed, on_step)
    samples = dim * iterations
    benign_rate = flips[~bad].sum() / (samples * int((~bad).sum()))
    if n_bad:
        bad_rate = flips[bad].sum() / (samples * n_bad)
        q = p_eff[bad][0]
        sd = np.sqrt(q * (1 - q) / (samples * n_bad))
        z = (bad_rate - q) / sd if sd > 0 else (0.0 if bad_rate == q else float("inf"))
        q_out = float(q)
    else:
        bad_rate = z = q_out = float("nan")
    weights = fd.weights.as_matrix(dim)
    informative = ~np.isclose(p_eff, 0.5, rtol=0, atol=1e-12)
    expected = np.sign(0.5 - p_eff)[:, None]
    if informative.any():
        accuracy = float(np.mean(np.sign(weights[informative]) == expected[informative]))
    else:
        accuracy = float("nan")
    oracle_w = np.where(informative, oracle_weights(p_eff).weights, 0.0)
    exact = exact_error_probability(p_eff, oracle_w)
    return (m, n_bad, r, p, seed, q_out, float(benign_rate), float(bad_rate), float(z), accuracy,
            errors["fd"] / samples, errors["mv"] / samples, exact)


def run_bounds(cfg, out: Path) -> list:
    b = cfg["bounds"]
    files = []
    for seed in cfg["seeds"]:
        name = f"bounds_seed{seed}.csv"
        with CsvSink(out / name, BOUNDS_CSV_HEADER) as sink:
            for row in bounds_rows(b["M"], b["p"], b["r"], b["L"], b["trials"], seed):
                sink.write(row)
        files.append(name)
    return files


def run_cost(cfg, out: Path) -> list:
    c = cfg["cost"]
    with CsvSink(out / "cost.csv", COST_CSV_HEADER) as sink:
        for n in c["N"]:
            for m in c["M"]:
                for t in c["T"]:
                    for algorithm in c["algorithms"]:
                        ks = c["K"] if algorithm == "topk" else [None]
                        for k in ks:
                            try:
                                model = CostModel(algorithm, n, m, t, k)
                            except ValueError as exc:
                                raise ConfigError(f"cost.K: {exc}", "cost.K") from None
                            sink.write(cost_row(model))
    return ["cost.csv"]


# ---------------------------------------------------------------- entry point

def _threads(cfg) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return cfg["fleet"]["threads"]
    try:
        value = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}", THREADS_ENV) from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}", THREADS_ENV)
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "argv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signfd", description="Run sign-aggregation experiments.")
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--mode", choices=MODES, help="override the config's mode")
    parser.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    parser.add_argument("--out", help="output directory (overrides the config's out)")
    return parser


def run(args) -> int:
    raw = load_config(args.config)
    if isinstance(raw, dict):
        raw = dict(raw)
        if args.mode is not None:
            raw["mode"] = args.mode
        if args.seed is not None:
            raw["seeds"] = [args.seed]
    cfg = resolve_config(raw)
    threads = _threads(cfg)
    out_dir = args.out or cfg["out"]
    if out_dir is None:
        raise ConfigError("no output directory: pass --out or set out", "out")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).unlink(missing_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot prepare output directory {out}: {exc.strerror}", "out") from None

    cfg["out"] = str(out)
    manifest = {
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "mode": cfg["mode"],
        "seeds": cfg["seeds"],
        "threads": threads,
        "config": cfg,
        "versions": _versions(),
        "started_at": _timestamp(),
        "status": "running",
        "files": [],
    }
    _write_json(out / "manifest.json", manifest)
    runners = {
        "train": lambda: run_train(cfg, out, threads),
        "channel-validate": lambda: run_channel(cfg, out),
        "bounds-table": lambda: run_bounds(cfg, out),
        "cost-table": lambda: run_cost(cfg, out),
    }
    try:
        manifest["files"] = runners[cfg["mode"]]()
    except BaseException as exc:
        err = exc if isinstance(exc, CliError) else CliError(f"{type(exc).__name__}: {exc}")
        if isinstance(exc, OSError):
            err = OutputError(f"{type(exc).__name__}: {exc}")
        manifest.update(status="failed", finished_at=_timestamp(), error=err.payload())
        _write_json(out / "manifest.json", manifest)
        (out / FAILED_MARKER).write_text(json.dumps(err.payload()) + "\n")
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        raise err from exc
    manifest.update(status="ok", finished_at=_timestamp())
    _write_json(out / "manifest.json", manifest)
    return 0


def main(argv=None) -> int:
    try:
        return run(build_parser().parse_args(argv))
    except CliError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
