import numpy as np
import pytest

from gravimetric.design import DesignMatrix, ModelSpec

NATURAL = ModelSpec(response_scale="natural")
LOG = ModelSpec(response_scale="log")


def make_design(y, X, columns, clusters=None, scale="natural", n_dropped=0):
    """Hand-built design for estimator unit tests."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if clusters is None:
        clusters = tuple(f"C{i}" for i in range(len(y)))
    spec = NATURAL if scale == "natural" else LOG
    return DesignMatrix(y=y, X=X, columns=tuple(columns),
                        clusters=tuple(clusters), spec_echo=spec,
                        n_dropped_zeros=n_dropped)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240801))
