"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_volume(v, name="volume", channels=None) -> np.ndarray:
    """Finite float64 ``(channel, x, y, z)`` array."""
    v = check_array(v, ensure_2d=False, allow_nd=True, dtype=np.float64,
                    ensure_all_finite=True, input_name=name)
    if v.ndim != 4:
        raise ValueError(f"{name} must be (channel, x, y, z), got shape {v.shape}")
    if channels is not None and v.shape[0] != channels:
        raise ValueError(f"{name} has {v.shape[0]} channels, expected {channels}")
    return v


def check_volumes(X, channels=None) -> list:
    """A batch of volumes: a 5D array or a sequence of 4D arrays (sizes may differ)."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        raise ValueError("expected a batch of volumes; wrap a single volume in a list")
    vols = [check_volume(v, f"X[{i}]", channels) for i, v in enumerate(X)]
    if not vols:
        raise ValueError("X is empty")
    return vols


def check_label_map(y, shape=None, name="labels") -> np.ndarray:
    """Non-negative integer ``(x, y, z)`` label map."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"{name} must be (x, y, z), got shape {y.shape}")
    if not (np.issubdtype(y.dtype, np.integer) or y.dtype == bool):
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise ValueError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError(f"{name} has negative labels")
    if shape is not None and y.shape != tuple(shape):
        raise ValueError(f"{name} shape {y.shape} does not match volume {tuple(shape)}")
    return y


def check_label_maps(y, volumes) -> list:
    if len(y) != len(volumes):
        raise ValueError(f"got {len(volumes)} volumes but {len(y)} label maps")
    return [check_label_map(lab, v.shape[1:], f"y[{i}]") for i, (lab, v) in enumerate(zip(y, volumes))]
