"""Multi-snapshot line spectral signal model and synthetic data generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circular import VonMises, sample_von_mises, wrap_angle


class InfeasibleSeparationError(RuntimeError):
    """No frequency draw met the minimum separation within the attempt budget."""


def as_columns(x) -> np.ndarray:
    """Complex 2-D view of ``x``; a 1-D input becomes a single column."""
    x = np.asarray(x, dtype=complex)
    return x[:, None] if x.ndim == 1 else np.atleast_2d(x)


@dataclass
class LineSpectrum:
    freqs: np.ndarray  # (K,) radians
    weights: np.ndarray  # (K, L) complex

    def __post_init__(self):
        self.freqs = np.atleast_1d(np.asarray(self.freqs, dtype=float))
        self.weights = as_columns(self.weights)
        if self.weights.shape[0] != self.freqs.size:
            raise ValueError("weights must have one row per frequency")

    @property
    def K(self) -> int:
        return self.freqs.size

    @property
    def L(self) -> int:
        return self.weights.shape[1]

    def signal(self, M: int) -> np.ndarray:
        """Noiseless M x L signal A(theta) W."""
        return steering_matrix(self.freqs, M) @ self.weights


@dataclass
class PriorBank:
    priors: list[VonMises]
    informative: bool

    def __post_init__(self):
        has_mass = [p.kappa > 0 for p in self.priors]
        if self.informative != any(has_mass) or (self.informative and not all(has_mass)):
            raise ValueError("informative banks need kappa > 0 everywhere, uninformative kappa = 0")

    def __len__(self) -> int:
        return len(self.priors)

    @property
    def means(self) -> np.ndarray:
        return np.array([p.mu for p in self.priors])

    @property
    def kappas(self) -> np.ndarray:
        return np.array([p.kappa for p in self.priors])


@dataclass
class GenConfig:
    K: int = 3
    N: int = 20
    M: int = 20
    L: int = 1
    snr_db: float = 4.0
    delta_theta: float | None = None  # defaults to 2 pi / N
    seed: int = 0

    def __post_init__(self):
        if self.delta_theta is None:
            self.delta_theta = 2.0 * math.pi / self.N
        if min(self.K, self.N, self.M, self.L) < 1:
            raise ValueError("K, N, M and L must be positive")
        if self.N <= self.K:
            raise ValueError("need N > K")
        if self.delta_theta <= 0 or self.K * self.delta_theta >= 2.0 * math.pi:
            raise ValueError("separation must be positive and K * delta_theta < 2 pi")


@dataclass
class Snapshot:
    Y: np.ndarray  # (M, L)
    noise_variance: float
    truth: LineSpectrum | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = as_columns(self.Y)
        if self.truth is not None and self.truth.L != self.Y.shape[1]:
            raise ValueError("truth weights and Y disagree on L")

    @property
    def M(self) -> int:
        return self.Y.shape[0]

    @property
    def L(self) -> int:
        return self.Y.shape[1]


def steering_vector(theta: float, M: int) -> np.ndarray:
    if M < 1:
        raise ValueError("M must be positive")
    return np.exp(1j * theta * np.arange(M))


def steering_matrix(thetas, M: int) -> np.ndarray:
    return np.exp(1j * np.outer(np.arange(M), np.asarray(thetas, dtype=float)))


def default_prior_bank(N: int, kappa0: float) -> PriorBank:
    """N evenly spaced priors at (2i - 1 - N) pi / (N + 1), i = 1..N."""
    i = np.arange(1, N + 1)
    means = (2 * i - 1 - N) * np.pi / (N + 1)
    return PriorBank([VonMises(m, kappa0) for m in means], informative=kappa0 > 0)


def wrap_distance(a, b):
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), 2.0 * np.pi)
    d = np.minimum(d, 2.0 * np.pi - d)
    return float(d) if np.ndim(d) == 0 else d


def min_separation(freqs) -> float:
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size < 2:
        return math.inf
    d = wrap_distance(freqs[:, None], freqs[None, :])
    return float(d[np.triu_indices(freqs.size, 1)].min())


def generate_frequencies(bank: PriorBank, K: int, delta_theta: float,
                         rng: np.random.Generator, max_attempts: int = 10_000) -> np.ndarray:
    """Draw K frequencies from K distinct bank entries, resampling the whole
    tuple until every pairwise wrap-around distance exceeds ``delta_theta``."""
    if K > len(bank):
        raise ValueError("cannot pick more priors than the bank holds")
    for _ in range(max_attempts):
        picks = rng.choice(len(bank), size=K, replace=False)
        freqs = np.array([sample_von_mises(bank.priors[j].mu, bank.priors[j].kappa, rng)
                          for j in picks])
        if min_separation(freqs) > delta_theta:
            return freqs
    raise InfeasibleSeparationError(
        f"no draw of {K} frequencies with separation > {delta_theta:.4g} in {max_attempts} attempts")


def noise_variance_for_snr(signal: np.ndarray, snr_db: float) -> float:
    M, L = signal.shape
    return float(np.linalg.norm(signal) ** 2 / (M * L * 10.0 ** (snr_db / 10.0)))


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_data(cfg: GenConfig, bank: PriorBank, rng: np.random.Generator) -> Snapshot:
    freqs = generate_frequencies(bank, cfg.K, cfg.delta_theta, rng)
    truth = LineSpectrum(freqs, complex_normal(rng, (cfg.K, cfg.L)))
    X = truth.signal(cfg.M)
    nu = noise_variance_for_snr(X, cfg.snr_db)
    Y = X + complex_normal(rng, (cfg.M, cfg.L), nu)
    return Snapshot(Y, nu, truth)


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator; ``seed`` may be an int or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


# Snapshot text format:
#   line 1:  "mvalse-snapshot 1"
#   header:  "M <int>", "L <int>", "noise_variance <float>", optional "K <int>"
#   "data" followed by M rows of L complex entries written as "re im" pairs;
#   with K > 0, "freqs" with K values then "weights" with K rows of L pairs.

_MAGIC = "mvalse-snapshot 1"


def _fmt_row(row: np.ndarray) -> str:
    return " ".join(f"{z.real:.17g} {z.imag:.17g}" for z in row)


def _parse_row(line: str, n: int) -> np.ndarray:
    vals = np.array(line.split(), dtype=float)
    if vals.size != 2 * n:
        raise ValueError(f"expected {2 * n} numbers, got {vals.size}")
    return vals[0::2] + 1j * vals[1::2]


def save_snapshot(snap: Snapshot, path) -> None:
    lines = [_MAGIC, f"M {snap.M}", f"L {snap.L}", f"noise_variance {snap.noise_variance:.17g}"]
    if snap.truth is not None:
        lines.append(f"K {snap.truth.K}")
    lines.append("data")
    lines.extend(_fmt_row(r) for r in snap.Y)
    if snap.truth is not None:
        lines.append("freqs")
        lines.append(" ".join(f"{f:.17g}" for f in snap.truth.freqs))
        lines.append("weights")
        lines.extend(_fmt_row(r) for r in snap.truth.weights)
    Path(path).write_text("\n".join(lines) + "\n")


def load_snapshot(path) -> Snapshot:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    header = {}
    pos = 1
    while lines[pos] != "data":
        key, value = lines[pos].split(maxsplit=1)
        header[key] = value
        pos += 1
    M, L = int(header["M"]), int(header["L"])
    K = int(header.get("K", 0))
    Y = np.array([_parse_row(lines[pos + 1 + r], L) for r in range(M)])
    pos += 1 + M
    truth = None
    if K:
        if lines[pos] != "freqs" or lines[pos + 2] != "weights":
            raise ValueError(f"{path}: malformed truth section")
        freqs = np.array(lines[pos + 1].split(), dtype=float)
        weights = np.array([_parse_row(lines[pos + 3 + k], L) for k in range(K)])
        truth = LineSpectrum(freqs, weights)
    return Snapshot(Y, float(header["noise_variance"]), truth)


__all__ = [
    "GenConfig", "InfeasibleSeparationError", "LineSpectrum", "PriorBank", "Snapshot",
    "default_prior_bank", "generate_data", "generate_frequencies", "load_snapshot",
    "make_rng", "min_separation", "save_snapshot", "steering_matrix", "steering_vector",
    "wrap_angle", "wrap_distance",
]
