from __future__ import annotations

import numpy as np
import pytest

from mia_audit.netcore import Layer, MlpModel


def bias_only_model(biases, input_dim=2):
    """Model that ignores its input: zero weights, fixed output biases."""
    b = np.asarray(biases, dtype=float)
    return MlpModel([Layer(np.zeros((input_dim, b.size)), b, "identity")])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
