"""Shared fixtures: phantoms are expensive enough to build once per session."""

import numpy as np
import pytest

from defreg import volume


@pytest.fixture(scope="session")
def two_tissue_64():
    return volume.make_phantom("two-tissue-tumor", 64, seed=1)

@pytest.fixture(scope="session")
def resected_64():
    return volume.make_phantom("resected-tumor", 64, seed=1)


@pytest.fixture(scope="session")
def sphere_32():
    return volume.make_phantom("sphere-shell", 32, seed=0)


@pytest.fixture(scope="session")
def two_tissue_32():
    return volume.make_phantom("two-tissue-tumor", 32, seed=7)


@pytest.fixture(scope="session")
def two_tissue_40():
    return volume.make_phantom("two-tissue-tumor", 40, seed=1)


@pytest.fixture(scope="session")
def resected_40():
    return volume.make_phantom("resected-tumor", 40, seed=1)


def rng_points(seed, n, lo=0.0, hi=10.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(n, 3))
