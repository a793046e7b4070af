import numpy as np
import pytest

from xdeconv.core import GmmParams
from xdeconv.data import Dataset


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + 0.3 * np.eye(d))


def random_params(rng, K, d, spread=2.0):
    alpha = rng.dirichlet(np.full(K, 2.0))
    means = rng.normal(scale=spread, size=(K, d))
    covs = np.stack([random_spd(rng, d) for _ in range(K)])
    return GmmParams(alpha, means, covs)


def random_noise(rng, n, d, kind="full"):
    if kind == "zero":
        return np.zeros((n, d, d))
    if kind == "diag":
        S = np.zeros((n, d, d))
        idx = np.arange(d)
        S[:, idx, idx] = rng.uniform(0.05, 1.0, size=(n, d))
        return S
    return np.stack([random_spd(rng, d, 0.5) for _ in range(n)])


def random_dataset(rng, n, d_obs, d_latent=None, noise="full", projection=False):
    d_latent = d_obs if d_latent is None else d_latent
    X = rng.normal(scale=2.0, size=(n, d_obs))
    S = random_noise(rng, n, d_obs, noise)
    R = rng.normal(size=(n, d_obs, d_latent)) if projection else None
    return Dataset(X, S, R)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria outcomes, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key:2d}. {line}")
