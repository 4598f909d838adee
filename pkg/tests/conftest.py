import numpy as np
import pytest

from crossfit_gee.model import Dataset


def random_spd(rng, l, cond=5.0):
    q, _ = np.linalg.qr(rng.normal(size=(l, l)))
    return q @ np.diag(np.linspace(1.0, cond, l)) @ q.T


def random_dataset(rng, n, p, l, beta=None, link="identity", scale=0.5):
    from crossfit_gee.model import get_link

    x = rng.uniform(-1, 1, size=(n, p, l))
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    mean = get_link(link).g(np.einsum("ipk,p->ik", x, beta))
    if link == "logit":
        y = (rng.uniform(size=mean.shape) < mean).astype(float)
    elif link == "log":
        y = rng.poisson(mean).astype(float)
    else:
        y = mean + scale * rng.normal(size=mean.shape)
    return Dataset(x, y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
