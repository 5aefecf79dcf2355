import numpy as np
import pytest

from marginlab import Dataset, Network, make_toy_dataset, mlp_classifier


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs():
    return make_toy_dataset("blobs", 400, noise=0.06, seed=11)


@pytest.fixture(scope="session")
def moons():
    return make_toy_dataset("moons", 400, noise=0.05, seed=12)


@pytest.fixture
def tiny_net() -> Network:
    """4-feature, 3-class dense net, small enough for finite differences."""
    return mlp_classifier(num_classes=3, input_dim=4, hidden=6, embedding_dim=5, seed=21)


@pytest.fixture
def tiny_batch(rng):
    x = rng.random((8, 4))
    y = rng.integers(0, 3, size=8)
    return x, y


def finite_difference(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)  # own the buffer: inputs may be read-only
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(approx, exact) -> float:
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact), 1e-12)
    return float(np.linalg.norm(approx - exact) / denom)
