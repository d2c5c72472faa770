"""Pytest configuration and fixtures for rogue_face tests."""

import numpy as np
import pytest

from rogue_face.config import DatasetConfig, FitConfig
from rogue_face.degrade import build_triplet_dataset
from rogue_face.model import CoefficientVector, generate_synthetic_basis
from rogue_face.render import Camera


@pytest.fixture(scope="session")
def basis():
    """Default-size synthetic basis (500 vertices)."""
    return generate_synthetic_basis(500, seed=0)


@pytest.fixture(scope="session")
def small_basis():
    """Small synthetic basis for fast render and fit tests."""
    return generate_synthetic_basis(144, seed=3)


@pytest.fixture(scope="session")
def camera64():
    return Camera.default(64)


@pytest.fixture(scope="session")
def camera32():
    return Camera.default(32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturbed(seed: int, scale: float = 0.1) -> CoefficientVector:
    """Canonical coefficients with small seeded identity, expression, lighting and pose offsets."""
    r = np.random.default_rng(seed)
    canonical = CoefficientVector.canonical()
    return canonical.with_segments(
        shape=r.normal(0.0, scale, 80),
        expression=r.normal(0.0, scale, 64),
        texture=r.normal(0.0, scale, 80),
        illumination=canonical.illumination + r.normal(0.0, 0.1 * scale, 27),
        pose=canonical.pose + np.concatenate([r.normal(0.0, 0.02, 3), r.normal(0.0, 0.02, 3)]),
    )


@pytest.fixture
def known_coeffs():
    return perturbed(7)


@pytest.fixture
def fast_fit():
    """Fit budget small enough for unit tests."""
    return FitConfig(guidance_iterations=5, robust_iterations=5, log_every=0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, small_basis, camera32):
    """A 2 x 3 paired dataset written to disk."""
    out = tmp_path_factory.mktemp("dataset")
    build_triplet_dataset(
        small_basis,
        camera32,
        identities=2,
        per_identity=3,
        seed=5,
        out_dir=out,
        config=DatasetConfig(identities=2, per_identity=3),
    )
    return out
