import numpy as np
import pytest

from sparsefront import data as data_mod


def _mnist_available():
    try:
        data_mod.load_mnist(split="test")
        return True
    except FileNotFoundError:
        return False


MNIST_AVAILABLE = _mnist_available()

needs_mnist = pytest.mark.skipif(
    not MNIST_AVAILABLE,
    reason="MNIST not found; run `sparsefront fetch-data` or set SPARSEFRONT_DATA_DIR",
)


@pytest.fixture(scope="session")
def mnist_train():
    return data_mod.load_mnist(split="train")


@pytest.fixture(scope="session")
def mnist_test():
    return data_mod.load_mnist(split="test")


@pytest.fixture(scope="session")
def pair_train(mnist_train):
    return data_mod.filter_pair(mnist_train, 3, 7)


@pytest.fixture(scope="session")
def pair_test(mnist_test):
    return data_mod.filter_pair(mnist_test, 3, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
