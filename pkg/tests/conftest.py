import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from esegeta.models import ModelConfig, Sequential, build_model
from esegeta.wrappers import ClassTarget

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

W = np.array([1.0, 2.0, 3.0])


def linear_model(w=W, dtype=np.float64):
    """score(x) = w . x for inputs of shape (1, 1, len(w))."""
    w = np.asarray(w, dtype=np.float64)
    return Sequential.from_arrays([("fc", "linear", {"weight": w[None, :]})], dtype=dtype)


def relu_net(seed=0, n_in=6, hidden=5, dtype=np.float64):
    """2-layer ReLU MLP on (1, 1, n_in) inputs with biases."""
    rng = np.random.default_rng(seed)
    return Sequential.from_arrays(
        [
            ("fc1", "linear", {"weight": rng.normal(size=(hidden, n_in)), "bias": rng.normal(size=hidden) * 0.1}),
            ("act", "relu"),
            ("fc2", "linear", {"weight": rng.normal(size=(1, hidden)), "bias": np.array([0.05])}),
        ],
        dtype=dtype,
    )


def conv_relu_net(seed=0, channels=3, dtype=np.float64):
    """conv -> relu -> conv -> relu -> 1x1 conv head with 2 classes, 2D."""
    rng = np.random.default_rng(seed)
    return Sequential.from_arrays(
        [
            ("c1", "conv", {"weight": rng.normal(size=(channels, 1, 3, 3)) * 0.5, "bias": rng.normal(size=channels) * 0.1},
             {"padding": 1}),
            ("a1", "relu"),
            ("c2", "conv", {"weight": rng.normal(size=(channels, channels, 3, 3)) * 0.3,
                            "bias": rng.normal(size=channels) * 0.1}, {"padding": 1}),
            ("a2", "relu"),
            ("head", "conv", {"weight": rng.normal(size=(2, channels, 1, 1)), "bias": np.zeros(2)}),
        ],
        dtype=dtype,
    )


@pytest.fixture
def lin():
    return linear_model()


@pytest.fixture
def cls0():
    return ClassTarget(0)


@pytest.fixture(scope="session")
def unet2d():
    return build_model(ModelConfig(dims=2, seed=0))


@pytest.fixture(scope="session")
def x2d():
    return np.random.default_rng(0).normal(size=(1, 1, 16, 16)).astype(np.float32)
