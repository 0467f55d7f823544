"""Multi-snapshot variational line spectral estimator (MVALSE).

Mean-field coordinate ascent over three blocks: the support and weights, the
model parameters (noise variance ``nu``, activation rate ``rho``, weight
variance ``tau``), and one von Mises posterior per candidate component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import circular
from .circular import (
    DegenerateDensityError,
    TrigPolynomial,
    VonMises,
    eval_on_grid,
    expected_steering,
    expected_steering_batch,
    kappa_from_resultant,
    moment_match,
    newton_refine,
    von_mises_product,
)
from .model import PriorBank, Snapshot, as_columns, default_prior_bank


class DegenerateInputError(ValueError):
    """The measurement matrix carries no energy."""


@dataclass
class EstimatorConfig:
    N: int = 20
    max_iters: int = 200
    tol: float = 1e-5
    prior: PriorBank | None = None  # None means uninformative
    grid_size: int = circular.DEFAULT_GRID
    dense_grid_size: int = circular.DENSE_GRID
    newton_steps: int = 2
    rho_clamp: tuple[float, float] | None = None
    kappa_max: float = circular.KAPPA_MAX
    kappa_floor: float = circular.KAPPA_FLOOR
    noise_variance: float | None = None  # known nu: skip its re-estimation

    def __post_init__(self):
        if self.noise_variance is not None and not self.noise_variance > 0:
            raise ValueError("known noise variance must be positive")
        if self.N < 1 or self.max_iters < 1 or not self.tol > 0:
            raise ValueError("need N >= 1, max_iters >= 1 and tol > 0")
        if self.prior is None:
            self.prior = default_prior_bank(self.N, 0.0)
        if len(self.prior) != self.N:
            raise ValueError(f"prior bank has {len(self.prior)} entries, expected N = {self.N}")
        if self.rho_clamp is None:
            eps = 1.0 / (10 * self.N)
            self.rho_clamp = (eps, 1.0 - eps)

    def grid_for(self, M: int) -> tuple[int, int]:
        """Grid sizes actually used for M sensors (raised to cover 4M points)."""
        need = 1 << max(2, math.ceil(math.log2(4 * M)))
        return max(self.grid_size, need), max(self.dense_grid_size, need)


@dataclass
class PosteriorState:
    mu: np.ndarray  # (N,) posterior mean directions
    kappa: np.ndarray  # (N,) posterior concentrations
    a_hat: np.ndarray  # (M, N) expected steering vectors
    s_hat: np.ndarray  # (N,) bool support
    W_hat: np.ndarray  # (|S|, L) posterior weight means, rows follow support order
    C_hat0: np.ndarray  # (|S|, |S|) per-snapshot weight covariance
    nu: float
    rho: float
    tau: float
    prior_assignment: np.ndarray  # (N,) bank index per component, -1 if unassigned
    flagged: np.ndarray = None  # (N,) components whose last frequency update degenerated

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(self.s_hat.size, dtype=bool)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.s_hat)

    @property
    def theta_q(self) -> list[VonMises]:
        return [VonMises(m, k) for m, k in zip(self.mu, self.kappa)]

    def copy(self) -> PosteriorState:
        return PosteriorState(
            self.mu.copy(), self.kappa.copy(), self.a_hat.copy(), self.s_hat.copy(),
            self.W_hat.copy(), self.C_hat0.copy(), self.nu, self.rho, self.tau,
            self.prior_assignment.copy(), self.flagged.copy(),
        )


@dataclass
class GramData:
    J: np.ndarray  # (N, N) Hermitian, diagonal exactly M
    H: np.ndarray  # (N, L)


@dataclass
class SupportResult:
    s_hat: np.ndarray
    W_hat: np.ndarray
    C_hat0: np.ndarray
    trajectory: list[float]
    converged: bool


@dataclass
class Estimate:
    K_hat: int
    freqs: np.ndarray
    concentrations: np.ndarray
    weights: np.ndarray
    X_hat: np.ndarray
    iterations: int
    converged: bool
    nu: float = math.nan
    rho: float = math.nan
    tau: float = math.nan
    history: list[float] = field(default_factory=list, repr=False)


# --------------------------------------------------------------------------
# support and weights


def compute_gram(a_hat: np.ndarray, Y: np.ndarray) -> GramData:
    M = a_hat.shape[0]
    AH = a_hat.conj().T
    J = AH @ a_hat
    J = 0.5 * (J + J.conj().T)
    np.fill_diagonal(J, M)
    return GramData(J, AH @ Y)


def _cholesky(mat: np.ndarray, M: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * M * np.eye(mat.shape[-1])
        return np.linalg.cholesky(mat + jitter)


def ln_Z(s, gram: GramData, nu: float, tau: float, rho: float) -> float:
    """Log evidence of support ``s`` up to an additive constant (0 for the empty support)."""
    idx = np.flatnonzero(np.asarray(s, dtype=bool))
    if idx.size == 0:
        return 0.0
    L = gram.H.shape[1]
    M = int(round(gram.J[0, 0].real))
    n = idx.size
    ratio = nu / tau
    chol = _cholesky(gram.J[np.ix_(idx, idx)] + ratio * np.eye(n), M)
    logdet = 2.0 * np.sum(np.log(np.diag(chol).real))
    z = linalg.solve_triangular(chol, gram.H[idx], lower=True)
    quad = np.sum(np.abs(z) ** 2)
    return float(-L * logdet + n * math.log(rho / (1.0 - rho)) + quad / nu + n * L * math.log(ratio))


def _ln_Z_batch(sets: np.ndarray, gram: GramData, nu: float, tau: float, rho: float) -> np.ndarray:
    """ln_Z for a stack of equal-size supports given as index rows."""
    count, n = sets.shape
    if n == 0:
        return np.zeros(count)
    L = gram.H.shape[1]
    ratio = nu / tau
    mats = gram.J[sets[:, :, None], sets[:, None, :]] + ratio * np.eye(n)
    try:
        chol = np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        return np.array([ln_Z(np.isin(np.arange(gram.J.shape[0]), row), gram, nu, tau, rho)
                         for row in sets])
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2).real), axis=1)
    z = np.linalg.solve(chol, gram.H[sets])
    quad = np.sum(np.abs(z) ** 2, axis=(1, 2))
    return -L * logdet + n * math.log(rho / (1.0 - rho)) + quad / nu + n * L * math.log(ratio)


def flip_gains(s: np.ndarray, gram: GramData, nu: float, tau: float, rho: float,
               current: float | None = None) -> np.ndarray:
    """Delta_k = ln Z(s with bit k flipped) - ln Z(s) for every k, by direct recomputation."""
    s = np.asarray(s, dtype=bool)
    N = s.size
    if current is None:
        current = ln_Z(s, gram, nu, tau, rho)
    on = np.flatnonzero(s)
    off = np.flatnonzero(~s)
    values = np.empty(N)
    if off.size:
        adds = np.column_stack([np.broadcast_to(on, (off.size, on.size)), off])
        values[off] = _ln_Z_batch(adds, gram, nu, tau, rho)
    if on.size:
        keep = ~np.eye(on.size, dtype=bool)
        removes = np.broadcast_to(on, (on.size, on.size))[keep].reshape(on.size, on.size - 1)
        values[on] = _ln_Z_batch(removes, gram, nu, tau, rho)
    return values - current


def weight_posterior(s: np.ndarray, gram: GramData, nu: float, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean rows W_S and per-snapshot covariance C_S0 for support ``s``."""
    idx = np.flatnonzero(s)
    L = gram.H.shape[1]
    if idx.size == 0:
        return np.zeros((0, L), dtype=complex), np.zeros((0, 0), dtype=complex)
    M = int(round(gram.J[0, 0].real))
    mat = gram.J[np.ix_(idx, idx)] + (nu / tau) * np.eye(idx.size)
    chol = _cholesky(mat, M)
    inv = linalg.cho_solve((chol, True), np.eye(idx.size, dtype=complex))
    inv = 0.5 * (inv + inv.conj().T)
    W = inv @ gram.H[idx]
    return W, nu * inv


def greedy_support_search(s0, gram: GramData, nu: float, tau: float, rho: float,
                          max_flips: int | None = None) -> SupportResult:
    """Single-bit-flip ascent on ln Z starting from ``s0``."""
    s = np.asarray(s0, dtype=bool).copy()
    N = s.size
    max_flips = 4 * N if max_flips is None else max_flips
    current = ln_Z(s, gram, nu, tau, rho)
    trajectory = [current]
    converged = False
    for _ in range(max_flips + 1):
        gains = flip_gains(s, gram, nu, tau, rho, current)
        k = int(np.argmax(gains))  # first maximum on ties
        if not gains[k] > 0.0:
            converged = True
            break
        if len(trajectory) > max_flips:
            break
        s[k] = ~s[k]
        current = current + gains[k]
        trajectory.append(current)
    W, C0 = weight_posterior(s, gram, nu, tau)
    return SupportResult(s, W, C0, trajectory, converged)


# --------------------------------------------------------------------------
# model parameters


def update_model_params(state: PosteriorState, Y: np.ndarray, N: int | None = None,
                        rho_clamp: tuple[float, float] | None = None) -> tuple[float, float, float]:
    M, L = Y.shape
    N = state.s_hat.size if N is None else N
    if rho_clamp is None:
        rho_clamp = (1.0 / (10 * N), 1.0 - 1.0 / (10 * N))
    idx = state.support
    total = np.linalg.norm(Y) ** 2
    rho = float(np.clip(idx.size / N, *rho_clamp))
    if idx.size == 0:
        return total / (M * L), rho, state.tau
    A = state.a_hat[:, idx]
    W = state.W_hat
    C0 = state.C_hat0
    J = A.conj().T @ A
    np.fill_diagonal(J, M)
    resid = np.linalg.norm(Y - A @ W) ** 2 / (M * L)
    spread = np.trace(J @ C0).real / M
    w_energy = np.sum(np.abs(W) ** 2, axis=1)
    a_energy = np.sum(np.abs(A) ** 2, axis=0)
    deficit = np.sum(w_energy * (1.0 / L - a_energy / (L * M)))
    nu = max(resid + spread + deficit, 1e-12 * total / (M * L))
    tau = (np.sum(np.abs(W) ** 2) + L * np.trace(C0).real) / (L * idx.size)
    return float(nu), rho, float(tau)


# --------------------------------------------------------------------------
# frequencies


def update_eta(i: int, state: PosteriorState, Y: np.ndarray) -> np.ndarray:
    """Coefficient vector of the frequency log-likelihood of component ``i``."""
    idx = state.support
    hits = np.flatnonzero(idx == i)
    if hits.size == 0:
        return np.zeros(Y.shape[0], dtype=complex)
    p = hits[0]
    L = Y.shape[1]
    W = state.W_hat
    w_i = W[p]
    # tr(C_{l,i}) + w_i^H w_l for every l in the support
    coupling = L * state.C_hat0[:, p] + W @ w_i.conj()
    coupling[p] = 0.0
    return (2.0 / state.nu) * (Y @ w_i.conj() - state.a_hat[:, idx] @ coupling)


def likelihood_factor(eta: np.ndarray, cfg: EstimatorConfig) -> VonMises:
    """Grid moment-matched von Mises fit to exp(Re(eta^H a(theta)))."""
    poly = TrigPolynomial(eta)
    G, G_dense = cfg.grid_for(poly.order)
    if not np.all(np.isfinite(poly.coeffs)):
        raise DegenerateDensityError("non-finite coefficients")
    vm = moment_match(eval_on_grid(poly, G), cfg.kappa_max)
    if vm.kappa > G * G / 40 and G_dense > G:
        vm = moment_match(eval_on_grid(poly, G_dense), cfg.kappa_max)
    return vm


def _log_posterior_derivatives(eta: np.ndarray, prior: VonMises):
    m = np.arange(eta.size)
    coeffs = np.conj(eta)
    m2 = m * m

    def objective(theta: float) -> tuple[float, float]:
        terms = coeffs * np.exp(1j * m * theta)
        d1 = -np.dot(m, terms.imag) - prior.kappa * math.sin(theta - prior.mu)
        d2 = -np.dot(m2, terms.real) - prior.kappa * math.cos(theta - prior.mu)
        return float(d1), float(d2)

    return objective


def update_theta_posterior(eta: np.ndarray, prior: VonMises, cfg: EstimatorConfig,
                           likelihood: VonMises | None = None) -> tuple[VonMises, np.ndarray]:
    """Von Mises approximation of prior(theta) * exp(Re(eta^H a(theta))) and its steering mean."""
    eta = np.asarray(eta, dtype=complex)
    if likelihood is None:
        likelihood = likelihood_factor(eta, cfg)
    combined = von_mises_product(likelihood, prior)
    if combined.kappa > 0.0:
        posterior = newton_refine(_log_posterior_derivatives(eta, prior), combined,
                                  cfg.newton_steps, cfg.kappa_floor, cfg.kappa_max)
    else:
        posterior = combined
    return posterior, expected_steering(posterior, eta.size)


def match_priors(likelihoods: dict[int, VonMises], bank: PriorBank) -> dict[int, int]:
    """Greedy one-to-one pairing of components with bank priors.

    Components are taken in order of decreasing likelihood concentration; each
    grabs the remaining prior that maximizes the resultant length of the
    product ``|kappa e^{j mu} + kappa0 e^{j mu0}|``.
    """
    if not bank.informative:
        return {i: i for i in likelihoods}
    order = sorted(likelihoods, key=lambda i: (-likelihoods[i].kappa, i))
    prior_res = bank.kappas * np.exp(1j * bank.means)
    free = np.ones(len(bank), dtype=bool)
    assignment = {}
    for i in order:
        vm = likelihoods[i]
        score = np.abs(vm.kappa * np.exp(1j * vm.mu) + prior_res)
        score[~free] = -np.inf
        j = int(np.argmax(score))
        assignment[i] = j
        free[j] = False
    return assignment


def update_frequencies(state: PosteriorState, Y: np.ndarray, cfg: EstimatorConfig) -> None:
    """Gauss-Seidel pass over the active components, in index order."""
    idx = state.support
    bank = cfg.prior
    state.prior_assignment[:] = -1
    if bank.informative:
        likelihoods = {}
        for i in idx:
            try:
                likelihoods[int(i)] = likelihood_factor(update_eta(i, state, Y), cfg)
            except DegenerateDensityError:
                state.flagged[i] = True
        assignment = match_priors(likelihoods, bank)
    else:
        assignment = {int(i): int(i) for i in idx}
    for i in idx:
        i = int(i)
        if i not in assignment:
            continue
        state.prior_assignment[i] = assignment[i]
        eta = update_eta(i, state, Y)
        try:
            post, a = update_theta_posterior(eta, bank.priors[assignment[i]], cfg)
        except DegenerateDensityError:
            state.flagged[i] = True
            continue
        state.flagged[i] = False
        state.mu[i], state.kappa[i] = post.mu, post.kappa
        state.a_hat[:, i] = a


# --------------------------------------------------------------------------
# driver


def reconstruct(state: PosteriorState) -> np.ndarray:
    return state.a_hat[:, state.support] @ state.W_hat


def initialize(snapshot: Snapshot | np.ndarray, cfg: EstimatorConfig) -> PosteriorState:
    """Matched-filter start: peel N periodogram peaks off the residual."""
    Y = snapshot.Y if isinstance(snapshot, Snapshot) else as_columns(snapshot)
    M, L = Y.shape
    N = cfg.N
    energy = np.linalg.norm(Y) ** 2
    if not energy > 0.0 or not np.isfinite(energy):
        raise DegenerateInputError("measurement matrix is zero or non-finite")
    power = energy / (M * L)
    nu = 0.1 * power if cfg.noise_variance is None else cfg.noise_variance
    rho = 0.5
    tau = max(power - nu, nu) / (rho * N)

    G, _ = cfg.grid_for(M)
    grid = circular.grid_angles(G)
    bin_width = 2.0 * np.pi / G
    kappa0 = kappa_from_resultant(math.exp(-0.5 * bin_width**2), cfg.kappa_max)
    A_grid = np.exp(1j * np.outer(np.arange(M), grid))
    full_spectrum = np.sum(np.abs(A_grid.conj().T @ Y) ** 2, axis=1)
    # orthogonal peeling: the residual is kept orthogonal to every atom picked so far
    basis = np.zeros((M, 0), dtype=complex)
    resid = Y.copy()
    taken = np.zeros(G, dtype=bool)
    mu = np.empty(N)
    for i in range(N):
        spectrum = np.sum(np.abs(A_grid.conj().T @ resid) ** 2, axis=1)
        if not spectrum.max() > 1e-20 * energy:
            spectrum = full_spectrum.copy()  # atoms already span the data
        spectrum[taken] = -np.inf
        g = int(np.argmax(spectrum))
        taken[g] = True
        mu[i] = grid[g]
        if basis.shape[1] < M:
            v = A_grid[:, g].copy()
            for _ in range(2):
                v -= basis @ (basis.conj().T @ v)
            norm_v = np.linalg.norm(v)
            if norm_v > 1e-8 * math.sqrt(M):
                basis = np.column_stack([basis, v / norm_v])
                resid = Y - basis @ (basis.conj().T @ Y)
    kappa = np.full(N, kappa0)
    a_hat = expected_steering_batch(mu, kappa, M)
    s_hat = np.ones(N, dtype=bool)
    W, C0 = weight_posterior(s_hat, compute_gram(a_hat, Y), nu, tau)
    return PosteriorState(mu, kappa, a_hat, s_hat, W, C0, nu, rho, tau,
                          np.full(N, -1, dtype=int))


def iterate(state: PosteriorState, Y: np.ndarray, cfg: EstimatorConfig) -> SupportResult:
    """One outer iteration: support/weights, model parameters, frequencies."""
    gram = compute_gram(state.a_hat, Y)
    result = greedy_support_search(state.s_hat, gram, state.nu, state.tau, state.rho)
    state.s_hat, state.W_hat, state.C_hat0 = result.s_hat, result.W_hat, result.C_hat0
    state.nu, state.rho, state.tau = update_model_params(state, Y, cfg.N, cfg.rho_clamp)
    if cfg.noise_variance is not None:
        state.nu = cfg.noise_variance
    update_frequencies(state, Y, cfg)
    return result


def _relative_change(prev: np.ndarray, cur: np.ndarray) -> float:
    num = np.linalg.norm(prev - cur)
    den = np.linalg.norm(prev)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return float(num / den)


def estimate_from_state(state: PosteriorState, iterations: int, converged: bool,
                        history: list[float] | None = None) -> Estimate:
    idx = state.support
    return Estimate(
        K_hat=int(idx.size),
        freqs=state.mu[idx].copy(),
        concentrations=state.kappa[idx].copy(),
        weights=state.W_hat.copy(),
        X_hat=reconstruct(state),
        iterations=iterations,
        converged=converged,
        nu=state.nu,
        rho=state.rho,
        tau=state.tau,
        history=history or [],
    )


def run(snapshot: Snapshot | np.ndarray, cfg: EstimatorConfig | None = None,
        return_state: bool = False):
    """Run the estimator to convergence and return an :class:`Estimate`."""
    cfg = EstimatorConfig() if cfg is None else cfg
    Y = snapshot.Y if isinstance(snapshot, Snapshot) else as_columns(snapshot)
    state = initialize(Y, cfg)
    X_prev = reconstruct(state)
    history = []
    converged = False
    t = 0
    while t < cfg.max_iters:
        t += 1
        iterate(state, Y, cfg)
        X = reconstruct(state)
        change = _relative_change(X_prev, X)
        history.append(change)
        X_prev = X
        if change < cfg.tol:
            converged = True
            break
    est = estimate_from_state(state, t, converged, history)
    return (est, state) if return_state else est


def variant_config(name: str, N: int, kappa0: float = 1e4, **kwargs) -> EstimatorConfig:
    """Estimator configured for a named variant: ``informative`` or ``uninformative``."""
    if name == "informative":
        bank = default_prior_bank(N, kappa0)
    elif name == "uninformative":
        bank = default_prior_bank(N, 0.0)
    else:
        raise ValueError(f"unknown variant {name!r}")
    return EstimatorConfig(N=N, prior=bank, **kwargs)


__all__ = [
    "DegenerateInputError", "Estimate", "EstimatorConfig", "GramData", "PosteriorState",
    "SupportResult", "compute_gram", "flip_gains", "greedy_support_search", "initialize",
    "iterate", "likelihood_factor", "ln_Z", "match_priors", "reconstruct", "run",
    "update_eta", "update_frequencies", "update_model_params", "update_theta_posterior",
    "variant_config", "weight_posterior",
]
