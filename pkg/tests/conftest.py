"""Shared fixtures: seeded streams, named instances, small hidden Laplacians."""

import numpy as np
import pytest
from loguru import logger

from forster.config import get_settings
from forster.core.random import make_rng
from forster.data import fixtures


@pytest.fixture(autouse=True)
def _quiet_logs():
    logger.remove()
    yield
    logger.remove()


@pytest.fixture
def rng():
    return make_rng(20240601)


@pytest.fixture
def settings():
    return get_settings()


@pytest.fixture
def fast_settings(settings):
    """Small caps for anything that runs the sparsifier or MDR."""
    return settings.with_overrides({
        "MDR_MAX_ROUNDS": 6,
        "MDR_ORACLE_CALLS": 1,
        "MDR_CHECK_EVERY": 2,
        "PACKING_MAX_TERMS": 16,
        "JL_CONSTANT": 6.0,
        "HUTCHINSON_CONSTANT": 6.0,
    })


@pytest.fixture
def three_row():
    return fixtures.three_row()


@pytest.fixture
def heavy_subspace():
    return fixtures.heavy_subspace()


@pytest.fixture
def smoothed_small(rng):
    """n = 12, d = 3 rows near the unit sphere."""
    A = rng.standard_normal((12, 3))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    return A + 0.1 * rng.standard_normal(A.shape)


@pytest.fixture
def path6():
    return fixtures.path_laplacian(6)


@pytest.fixture
def star8(rng):
    return fixtures.star_laplacian(8, rng)
