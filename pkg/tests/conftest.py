import numpy as np
import pytest

from mvalse.circular import VonMises, expected_steering
from mvalse.estimator import PosteriorState, compute_gram, weight_posterior


def random_state(rng, N=6, M=8, L=3, active=None, kappa_range=(5.0, 500.0)):
    """A self-consistent posterior state with random frequencies and support."""
    mu = rng.uniform(-np.pi, np.pi, N)
    kappa = rng.uniform(*kappa_range, N)
    a_hat = np.column_stack([expected_steering(VonMises(m, k), M) for m, k in zip(mu, kappa)])
    if active is None:
        s = rng.random(N) < 0.6
        s[0] = True
    else:
        s = np.zeros(N, dtype=bool)
        s[list(active)] = True
    Y = rng.standard_normal((M, L)) + 1j * rng.standard_normal((M, L))
    nu, tau = rng.uniform(0.2, 2.0), rng.uniform(0.5, 3.0)
    W, C0 = weight_posterior(s, compute_gram(a_hat, Y), nu, tau)
    state = PosteriorState(mu, kappa, a_hat, s, W, C0, nu, 0.3, tau, np.full(N, -1))
    return state, Y


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 10


@pytest.fixture
def acceptance():
    """Record one verdict per acceptance criterion and fail the test if it did not hold."""

    def report(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for reps in terminalreporter.stats.values()
              for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = _ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
