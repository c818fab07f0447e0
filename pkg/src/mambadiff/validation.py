"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, patch: int = 2, value_range: float = 1.0) -> np.ndarray:
    """Validate a batch of images: (n, C, H, W), finite, within [-r, r]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n_samples, channels, height, width), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[2] % patch or X.shape[3] % patch:
        raise ValueError(f"image size {X.shape[2]}x{X.shape[3]} not divisible by patch size {patch}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    m = float(np.abs(X).max())
    if m > value_range + 1e-6:
        raise ValueError(f"images must lie in [-{value_range}, {value_range}]; max abs value {m:.3g}")
    return X


def check_labels(y, n_samples: int, n_classes: int) -> np.ndarray:
    """Validate integer class labels in [0, n_classes)."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"expected labels of shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels out of range [0, {n_classes})")
    return y
