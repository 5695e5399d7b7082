"""Shared fixtures for the Robust Lasso test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add repository root to path so `src.*` imports resolve
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.dataset import SyntheticConfig, generate_synthetic  # noqa: E402


@pytest.fixture(scope='session')
def three_class_dataset():
    """Three-class synthetic set: 300 inliers then 90 outliers."""
    return generate_synthetic(SyntheticConfig.three_class(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_problem(seed: int, n: int = 12, p: int = 2):
    """Small random design with an intercept and labels carrying a few large shifts."""
    r = np.random.default_rng(seed)
    features = r.normal(size=(n, p))
    y = features @ r.normal(size=p) + 0.1 * r.normal(size=n)
    y[r.choice(n, size=max(1, n // 5), replace=False)] += r.choice([-3.0, 3.0], size=max(1, n // 5))
    return features, y
