import numpy as np
import pytest

from khopgnn.graph import Graph


@pytest.fixture
def fig3():
    """Five nodes: 0-1, 0-2, 1-2, 1-3, 1-4 (root 0 sees ring {1, 2} and ring {3, 4})."""
    return Graph.from_edges(5, [(0, 1), (0, 2), (1, 2), (1, 3), (1, 4)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jitter_biases(module, rng, scale=0.1):
    """Move biases off zero so no ReLU input sits exactly on the kink.

    With zero biases a hidden layer whose units are all inactive outputs an
    exact zero vector and the next ReLU input is exactly 0, where central
    differences average the two one-sided slopes.
    """
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.value = p.value + rng.normal(scale=scale, size=p.value.shape)
