"""Error metrics for line spectral estimates and a Cramér-Rao reference."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .circular import wrap_angle
from .model import as_columns, steering_matrix

NEG_INF_DB = -320.0


class UndefinedMetricError(ValueError):
    pass


@dataclass
class TrialRecord:
    nmse_signal_db: float
    nmse_freq_db: float
    K_hat: int
    K_true: int
    iterations: int
    runtime_seconds: float
    crb_db: float = math.nan
    trial: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def to_db(ratio: float) -> float:
    if ratio <= 0.0:
        return NEG_INF_DB
    return max(10.0 * math.log10(ratio), NEG_INF_DB)


def nmse_signal(X_hat, X_true) -> float:
    X_hat = np.asarray(X_hat)
    X_true = np.asarray(X_true)
    if X_hat.shape != X_true.shape:
        raise ValueError(f"shape mismatch {X_hat.shape} vs {X_true.shape}")
    ref = np.linalg.norm(X_true) ** 2
    if ref == 0.0:
        raise UndefinedMetricError("true signal has zero energy")
    return to_db(np.linalg.norm(X_hat - X_true) ** 2 / ref)


def _wrapped_sq(a, b):
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2


def _pair(candidates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Reorder candidates so position k pairs with truth[k] at minimum wrapped squared error."""
    K = truth.size
    cost = _wrapped_sq(candidates[:, None], truth[None, :])
    if K <= 8:
        best = min(itertools.permutations(range(K)),
                   key=lambda p: sum(cost[p[k], k] for k in range(K)))
        return candidates[list(best)]
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(K)
    out[cols] = candidates[rows]
    return out


def align_frequencies(theta_hat, concentrations, theta_true) -> np.ndarray:
    """Match estimated frequencies to the truth.

    Surplus estimates are trimmed to the K most concentrated ones, missing
    ones are filled with zeros, and the result is ordered like ``theta_true``.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    concentrations = np.atleast_1d(np.asarray(concentrations, dtype=float))
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    K = theta_true.size
    if theta_hat.size > K:
        keep = np.argsort(-concentrations, kind="stable")[:K]
        theta_hat = theta_hat[np.sort(keep)]
    elif theta_hat.size < K:
        theta_hat = np.concatenate([theta_hat, np.zeros(K - theta_hat.size)])
    if K == 0:
        return theta_hat
    return _pair(theta_hat, theta_true)


def nmse_freq(aligned, theta_true) -> float:
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    ref = float(np.sum(theta_true**2))
    if ref == 0.0:
        raise UndefinedMetricError("true frequencies are all zero")
    return to_db(float(np.sum(_wrapped_sq(aligned, theta_true))) / ref)


def order_stats(records) -> tuple[float, float, float]:
    """Fractions of trials with K_hat == K, K_hat > K and K_hat < K."""
    records = list(records)
    if not records:
        raise ValueError("no trial records")
    n = len(records)
    correct = sum(r.K_hat == r.K_true for r in records)
    over = sum(r.K_hat > r.K_true for r in records)
    return correct / n, over / n, (n - correct - over) / n


def crb_freq(theta_true, W_true, M: int, nu: float) -> np.ndarray:
    """Deterministic (conditional) Cramér-Rao bound on each frequency's variance.

    Weights are treated as unknown deterministic nuisance parameters; noise is
    circular complex Gaussian with per-entry variance ``nu``.
    """
    theta = np.atleast_1d(np.asarray(theta_true, dtype=float))
    W = as_columns(W_true)
    A = steering_matrix(theta, M)
    D = 1j * np.arange(M)[:, None] * A
    if np.linalg.matrix_rank(A) < theta.size:
        raise np.linalg.LinAlgError("steering matrix is rank deficient")
    proj = np.eye(M) - A @ np.linalg.pinv(A)
    fisher = (2.0 / nu) * np.real((D.conj().T @ proj @ D) * (W @ W.conj().T).T)
    return np.diag(np.linalg.inv(fisher)).copy()


def crb_nmse_db(theta_true, W_true, M: int, nu: float) -> float:
    """Frequency NMSE an estimator sitting on the bound would reach, in dB."""
    theta = np.atleast_1d(np.asarray(theta_true, dtype=float))
    return to_db(float(np.sum(crb_freq(theta, W_true, M, nu)) / np.sum(theta**2)))
