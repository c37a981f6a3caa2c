from dataclasses import dataclass

import numpy as np


@dataclass
class ArrayDataset:
    """Bare feature/target holder matching the Dataset training surface."""

    features: np.ndarray
    targets: np.ndarray


def toy_separable(n=200, seed=0):
    """Linearly separable 2-feature binary set (margin well above noise)."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0.0).astype(float)
    X = X + 0.4 * np.sign(X[:, 0] + 0.5 * X[:, 1])[:, None] * np.array([1.0, 0.5])
    return ArrayDataset(X, y)
