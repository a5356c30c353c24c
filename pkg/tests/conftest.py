import sys

import numpy as np
import pytest

from gmmimprove.gmm import GmmPolicy


def random_spd(rng, n, scale=1.0, min_eig=0.05):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    vals = rng.uniform(min_eig, 1.0, n) * scale
    return (q * vals) @ q.T


def random_policy(rng, k=3, dim_s=3):
    """Random valid policy whose joint covariances are positive definite."""
    weights = rng.dirichlet(np.ones(k))
    means = rng.normal(size=(k, 2 * dim_s))
    covs = np.stack([random_spd(rng, 2 * dim_s) for _ in range(k)])
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return GmmPolicy(weights, means, covs, dim_s=dim_s)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
