"""Seeded Monte Carlo harness for the synthetic snapshot-sweep experiment.

Every trial draws its data from a Philox stream keyed on
(master seed, sweep value, trial index), so results do not depend on how
trials are scheduled across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import estimator, metrics
from .model import GenConfig, default_prior_bank, generate_data, make_rng

log = logging.getLogger(__name__)

VARIANTS = ("informative", "uninformative")
SWEEPABLE = ("L", "snr_db", "M", "K")
COLUMNS = ("sweep_var", "variant", "nmse_x_db", "nmse_theta_db", "p_correct", "p_over",
           "p_under", "crb_db", "mean_iters", "mean_runtime_s")
AVERAGING_NOTE = "NMSE and CRB columns are means of per-trial dB values"


@dataclass
class ExperimentConfig:
    K: int = 3
    N: int = 20
    M: int = 20
    L: int = 1
    snr_db: float = 4.0
    delta_theta: float | None = None
    kappa0: float = 1e4
    sweep_var: str = "L"
    sweep: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7])
    trials: int = 200
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seed: int = 0
    parallelism: int = 0  # 0 means all available cores
    max_iters: int = 200
    tol: float = 1e-5
    timing: bool = False  # wall-clock runtimes make output non-reproducible
    out: str | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.sweep_var not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.sweep_var!r}; choose from {SWEEPABLE}")
        if not self.sweep:
            raise ValueError("sweep needs at least one value")
        if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
            raise ValueError("sweep values must be strictly increasing")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown or not self.variants:
            raise ValueError(f"unknown variants {sorted(unknown)}; choose from {VARIANTS}")
        if self.format not in ("csv", "json"):
            raise ValueError("format must be csv or json")

    def gen_config(self, value) -> GenConfig:
        base = dict(K=self.K, N=self.N, M=self.M, L=self.L, snr_db=self.snr_db,
                    delta_theta=self.delta_theta, seed=self.seed)
        base[self.sweep_var] = type(base[self.sweep_var])(value)
        return GenConfig(**base)


@dataclass
class ExperimentResults:
    config: ExperimentConfig
    rows: list[dict]
    records: dict  # (sweep value, variant) -> list[TrialRecord]

    def row(self, value, variant) -> dict:
        for r in self.rows:
            if r["sweep_var"] == value and r["variant"] == variant:
                return r
        raise KeyError((value, variant))


def trial_seed(master: int, value, trial: int) -> np.random.SeedSequence:
    code = struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return np.random.SeedSequence(entropy=int(master), spawn_key=(code, int(trial)))


def run_trial(cfg: ExperimentConfig, value, trial: int) -> dict[str, metrics.TrialRecord]:
    """Generate one dataset and run every requested variant on it."""
    gen = cfg.gen_config(value)
    bank = default_prior_bank(gen.N, cfg.kappa0)
    snap = generate_data(gen, bank, make_rng(trial_seed(cfg.seed, value, trial)))
    truth = snap.truth
    X_true = truth.signal(gen.M)
    crb_db = metrics.crb_nmse_db(truth.freqs, truth.weights, gen.M, snap.noise_variance)
    out = {}
    for variant in cfg.variants:
        est_cfg = estimator.variant_config(variant, gen.N, cfg.kappa0,
                                           max_iters=cfg.max_iters, tol=cfg.tol)
        start = time.perf_counter()
        est = estimator.run(snap, est_cfg)
        elapsed = time.perf_counter() - start if cfg.timing else 0.0
        aligned = metrics.align_frequencies(est.freqs, est.concentrations, truth.freqs)
        out[variant] = metrics.TrialRecord(
            nmse_signal_db=metrics.nmse_signal(est.X_hat, X_true),
            nmse_freq_db=metrics.nmse_freq(aligned, truth.freqs),
            K_hat=est.K_hat,
            K_true=truth.K,
            iterations=est.iterations,
            runtime_seconds=elapsed,
            crb_db=crb_db,
            trial=trial,
        )
    return out


def _run_chunk(args):
    cfg, items = args
    return [(value, trial, run_trial(cfg, value, trial)) for value, trial in items]


def _workers(requested: int) -> int:
    if requested and requested > 0:
        return requested
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def summarize(value, variant, records: list[metrics.TrialRecord]) -> dict:
    records = sorted(records, key=lambda r: r.trial)
    p_correct, p_over, p_under = metrics.order_stats(records)
    return {
        "sweep_var": value,
        "variant": variant,
        "nmse_x_db": math.fsum(r.nmse_signal_db for r in records) / len(records),
        "nmse_theta_db": math.fsum(r.nmse_freq_db for r in records) / len(records),
        "p_correct": p_correct,
        "p_over": p_over,
        "p_under": p_under,
        "crb_db": math.fsum(r.crb_db for r in records) / len(records),
        "mean_iters": math.fsum(r.iterations for r in records) / len(records),
        "mean_runtime_s": math.fsum(r.runtime_seconds for r in records) / len(records),
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentResults:
    items = [(value, t) for value in cfg.sweep for t in range(cfg.trials)]
    workers = min(_workers(cfg.parallelism), len(items))
    if workers <= 1:
        done = _run_chunk((cfg, items))
    else:
        chunks = [items[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = [r for part in pool.map(_run_chunk, [(cfg, c) for c in chunks]) for r in part]
    records = {(value, v): [] for value in cfg.sweep for v in cfg.variants}
    for value, _trial, by_variant in done:
        for v, rec in by_variant.items():
            records[(value, v)].append(rec)
    rows = []
    for value in cfg.sweep:
        for v in cfg.variants:
            records[(value, v)].sort(key=lambda r: r.trial)
            rows.append(summarize(value, v, records[(value, v)]))
            log.info("%s=%s %s: P(over)=%.3f nmse_theta=%.2f dB", cfg.sweep_var, value, v,
                     rows[-1]["p_over"], rows[-1]["nmse_theta_db"])
    return ExperimentResults(cfg, rows, records)


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.9g}"


def render(results: ExperimentResults, fmt: str = "csv") -> str:
    if not results.rows:
        raise ValueError("no results to write")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in results.rows:
            writer.writerow([_fmt(row[c]) for c in COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        cfg = results.config
        meta = {
            "sweep_variable": cfg.sweep_var,
            "averaging": AVERAGING_NOTE,
            "config": {k: v for k, v in asdict(cfg).items() if k not in ("out", "format", "parallelism")},
        }
        rows = [{c: (row[c] if isinstance(row[c], str) else float(_fmt(row[c]))) for c in COLUMNS}
                for row in results.rows]
        return json.dumps({"meta": meta, "records": rows}, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def emit(results: ExperimentResults, fmt: str, path) -> Path:
    if path is None or str(path) == "":
        raise ValueError("output path is empty")
    path = Path(path)
    text = render(results, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def parse_table(text: str, fmt: str = "csv") -> list[dict]:
    """Read back what :func:`render` produced."""
    if fmt == "json":
        return json.loads(text)["records"]
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for key, val in raw.items():
            row[key] = val if key == "variant" else float(val)
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# configuration files: flat key=value lines, repeated "sweep=" entries accumulate


def _coerce(name: str, text: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kind = str(types[name])
    if "bool" in kind:
        return text.strip().lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return None if text.strip().lower() == "none" else float(text)
    return text.strip()


def _sweep_values(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if part:
            num = float(part)
            out.append(int(num) if num.is_integer() else num)
    return out


def parse_config_text(text: str) -> dict:
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "sweep":
            values.setdefault("sweep", []).extend(_sweep_values(val))
        elif key in ("variant", "variants"):
            values.setdefault("variants", []).extend(v.strip() for v in val.split(",") if v.strip())
        elif key in known:
            values[key] = _coerce(key, val)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
