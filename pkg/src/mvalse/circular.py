"""Circular-statistics primitives used by the frequency posteriors.

Everything here is a pure function of its arguments. Bessel ratios are built
from exponentially scaled Bessel functions so that concentrations up to
``KAPPA_MAX`` never overflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

KAPPA_MAX = 1e6
KAPPA_FLOOR = 1e-8
DEFAULT_GRID = 2**9
DENSE_GRID = 2**12


class DegenerateDensityError(ValueError):
    """Raised when a log-density carries no finite mass."""


def wrap_angle(theta):
    """Wrap angles into [-pi, pi)."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class VonMises:
    """Von Mises distribution with mean direction ``mu`` and concentration ``kappa``."""

    mu: float
    kappa: float

    def __post_init__(self):
        kappa = float(self.kappa)
        if not kappa >= 0.0 or math.isnan(kappa):
            raise ValueError(f"concentration must be non-negative, got {self.kappa}")
        object.__setattr__(self, "mu", wrap_angle(float(self.mu)))
        object.__setattr__(self, "kappa", min(kappa, KAPPA_MAX))

    def logpdf(self, theta):
        log_norm = math.log(2.0 * math.pi) + math.log(special.ive(0, self.kappa)) + self.kappa
        return self.kappa * np.cos(np.asarray(theta) - self.mu) - log_norm

    def pdf(self, theta):
        return np.exp(self.logpdf(theta))

    @property
    def resultant(self) -> complex:
        """First trigonometric moment E[exp(j theta)]."""
        return circular_moment(self, 1)

    def sample(self, rng: np.random.Generator, size=None):
        """Draw samples with the Best-Fisher wrapped-Cauchy rejection sampler."""
        return sample_von_mises(self.mu, self.kappa, rng, size)


@dataclass(frozen=True)
class TrigPolynomial:
    """Real trigonometric polynomial ``Re(sum_m conj(coeffs[m]) exp(j m theta))``."""

    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=complex).ravel())

    @property
    def order(self) -> int:
        return self.coeffs.size

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        m = np.arange(self.order)
        phases = np.exp(1j * np.multiply.outer(theta, m))
        return np.real(phases @ np.conj(self.coeffs))

    def derivatives(self, theta: float) -> tuple[float, float, float]:
        """Value, first and second derivative at a single angle."""
        m = np.arange(self.order)
        terms = np.conj(self.coeffs) * np.exp(1j * m * theta)
        return (
            float(np.real(terms.sum())),
            float(np.real((1j * m * terms).sum())),
            float(-np.real((m * m * terms).sum())),
        )


def bessel_ratio(p, kappa):
    """I_p(kappa) / I_0(kappa), computed from exponentially scaled Bessel functions.

    Accepts scalars or broadcastable arrays for both arguments.
    """
    p_arr = np.asarray(p)
    k_arr = np.asarray(kappa, dtype=float)
    if np.any(p_arr < 0):
        raise ValueError("order must be non-negative")
    ratio = special.ive(p_arr, k_arr) / special.ive(0, k_arr)
    ratio = np.where(p_arr == 0, 1.0, ratio)
    ratio = np.clip(ratio, 0.0, 1.0)
    if ratio.ndim == 0:
        return float(ratio)
    return ratio


def _bessel_ratio_derivative(kappa: float, a1: float) -> float:
    # d/dk I1/I0 = 1 - A/k - A^2
    if kappa < 1e-6:
        return 0.5 - 3.0 * kappa * kappa / 16.0
    return 1.0 - a1 / kappa - a1 * a1


def circular_moment(vm: VonMises, m: int) -> complex:
    """Trigonometric moment E[exp(j m theta)] = exp(j m mu) I_m(kappa)/I_0(kappa)."""
    return complex(np.exp(1j * m * vm.mu) * bessel_ratio(m, vm.kappa))


def expected_steering(vm: VonMises, M: int) -> np.ndarray:
    """Posterior mean of the steering vector a(theta) under ``vm``."""
    if M < 1:
        raise ValueError("M must be positive")
    m = np.arange(M)
    return np.exp(1j * m * vm.mu) * bessel_ratio(m, vm.kappa)


def expected_steering_batch(mu: np.ndarray, kappa: np.ndarray, M: int) -> np.ndarray:
    """Columns are ``expected_steering`` for each (mu, kappa) pair; shape (M, n)."""
    m = np.arange(M)[:, None]
    return np.exp(1j * m * np.asarray(mu)[None, :]) * bessel_ratio(m, np.asarray(kappa)[None, :])


@lru_cache(maxsize=16)
def _grid_tables(G: int) -> tuple[np.ndarray, np.ndarray]:
    theta = -np.pi + 2.0 * np.pi * np.arange(G) / G
    phasor = np.exp(1j * theta)
    theta.flags.writeable = False
    phasor.flags.writeable = False
    return theta, phasor


def grid_angles(G: int) -> np.ndarray:
    """Uniform grid theta_g = -pi + 2 pi g / G (read-only, cached)."""
    return _grid_tables(G)[0]


def eval_on_grid(poly: TrigPolynomial, G: int) -> np.ndarray:
    """Evaluate ``poly`` at theta_g = -pi + 2 pi g / G with one FFT."""
    M = poly.order
    if G < 4 * M or G & (G - 1):
        raise ValueError(f"grid size {G} must be a power of two and at least {4 * M}")
    # exp(j m theta_g) = (-1)^m exp(j 2 pi m g / G)
    signs = np.where(np.arange(M) % 2 == 0, 1.0, -1.0)
    padded = np.zeros(G, dtype=complex)
    padded[:M] = np.conj(poly.coeffs) * signs
    return np.real(np.fft.ifft(padded)) * G


def _a1(kappa: float) -> float:
    return float(special.ive(1, kappa) / special.ive(0, kappa))


def kappa_from_resultant(R: float, kappa_max: float = KAPPA_MAX) -> float:
    """Invert A(kappa) = I_1(kappa)/I_0(kappa) by Newton iterations."""
    R = float(R)
    if R <= 0.0:
        return 0.0
    if R >= 1.0:
        warnings.warn(f"resultant length {R} >= 1, concentration clamped to {kappa_max}",
                      RuntimeWarning, stacklevel=2)
        return kappa_max
    if R >= _a1(kappa_max):
        return kappa_max
    # Best-Fisher style starting point; 1/(2(1-R)) is the large-kappa asymptote
    kappa = R * (2.0 - R * R) / (1.0 - R * R)
    if R > 0.85:
        kappa = 1.0 / (2.0 * (1.0 - R) - (1.0 - R) ** 2 - (1.0 - R) ** 3)
    best = math.inf
    for _ in range(60):
        a1 = _a1(kappa)
        err = a1 - R
        if abs(err) >= best and abs(err) < 1e-12:
            break
        best = min(best, abs(err))
        if err == 0.0:
            break
        step = err / _bessel_ratio_derivative(kappa, a1)
        new = kappa - step
        if new <= 0.0:
            new = 0.5 * kappa
        kappa = min(new, kappa_max)
        if abs(step) <= 1e-12 * kappa:
            break
    return float(min(kappa, kappa_max))


def resultant_from_log_density(log_density: np.ndarray) -> complex:
    f = np.asarray(log_density, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("log-density must be a non-empty vector")
    top = np.max(f)
    if not np.isfinite(top):
        raise DegenerateDensityError("log-density has no finite mass")
    w = np.exp(f - top)
    w /= w.sum()
    return complex(np.dot(w, _grid_tables(f.size)[1]))


def moment_match(log_density: np.ndarray, kappa_max: float = KAPPA_MAX) -> VonMises:
    """Von Mises with the same first trigonometric moment as a gridded density.

    ``log_density[g]`` is the unnormalized log-density at -pi + 2 pi g / G.
    """
    z = resultant_from_log_density(log_density)
    R = abs(z)
    if R < 1e-12:  # round-off level of a flat density
        return VonMises(0.0, 0.0)
    return VonMises(np.angle(z), kappa_from_resultant(min(R, 1.0 - 1e-16), kappa_max))


def newton_refine(
    objective: Callable[[float], tuple[float, float]],
    init: VonMises,
    steps: int = 2,
    kappa_floor: float = KAPPA_FLOOR,
    kappa_max: float = KAPPA_MAX,
) -> VonMises:
    """Refine a von Mises fit to a log-density by Newton steps on its mode.

    ``objective(theta)`` returns the first and second derivatives of the
    log-density. The concentration is read off the curvature at the mode.
    A step that increases ``|f'|`` or starts from a non-concave point is
    rejected and the last accepted estimate returned.
    """
    mu = init.mu
    d1, d2 = objective(mu)
    if not (np.isfinite(d1) and np.isfinite(d2)) or d2 >= 0.0:
        return init
    accepted = False
    for _ in range(steps):
        cand = wrap_angle(mu - d1 / d2)
        c1, c2 = objective(cand)
        if not (np.isfinite(c1) and np.isfinite(c2)) or c2 >= 0.0 or abs(c1) > abs(d1):
            break
        mu, d1, d2 = cand, c1, c2
        accepted = True
        if d1 == 0.0:
            break
    if not accepted and d1 != 0.0:
        return init
    return VonMises(mu, min(max(-d2, kappa_floor), kappa_max))


def von_mises_product(a: VonMises, b: VonMises) -> VonMises:
    """Normalized product of two von Mises densities (resultants add)."""
    z = a.kappa * np.exp(1j * a.mu) + b.kappa * np.exp(1j * b.mu)
    return VonMises(np.angle(z), abs(z))


def sample_von_mises(mu: float, kappa: float, rng: np.random.Generator, size=None):
    """Best-Fisher (1979) rejection sampler with a wrapped-Cauchy envelope."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape)) if shape else 1
    if kappa < 1e-12:
        out = rng.uniform(-np.pi, np.pi, n)
    else:
        tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
        r = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(n)
        filled = 0
        while filled < n:
            u1, u2, u3 = rng.random((3, n - filled))
            z = np.cos(np.pi * u1)
            f = (1.0 + r * z) / (r + z)
            c = kappa * (r - f)
            ok = (c * (2.0 - c) - u2 > 0.0) | (np.log(c / u2) + 1.0 - c >= 0.0)
            theta = np.sign(u3[ok] - 0.5) * np.arccos(np.clip(f[ok], -1.0, 1.0))
            take = theta[: n - filled]
            out[filled:filled + take.size] = take
            filled += take.size
        out = wrap_angle(out + mu)
    out = np.asarray(out)
    if not shape:
        return float(out[0])
    return out.reshape(shape)
