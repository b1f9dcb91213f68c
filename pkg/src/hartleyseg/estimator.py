"""scikit-learn style wrapper around the segmentation networks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_label_maps, check_volume, check_volumes
from .metrics import foreground_dice
from .networks import Model, NetworkConfig
from .training import TrainConfig, normalize_intensity, train


class HartleySegmenter(BaseEstimator):
    """Voxel-wise segmenter for multi-channel 3D volumes.

    ``X`` is a 5D array ``(n, channel, x, y, z)`` or a list of 4D volumes,
    ``y`` the matching list of integer label maps. Intensities are
    normalized per channel inside ``fit`` and ``predict``, so raw scanner
    values can be passed directly. Because the networks act in a truncated
    frequency band, a fitted estimator accepts volumes of any size.

    Parameters
    ----------
    variant : {"hnoseg", "hartleymha", "fno"}
    width, k_max, n_blocks, n_heads : architecture settings.
    n_classes : int or None
        Defaults to ``max(label) + 1`` over the training labels.
    epochs, batch_size, lr_max, lr_min, val_fraction : training settings.
    augment : bool
        Random affine augmentation during training.
    random_state : int
        Seeds weight initialization, augmentation and the validation split.
    """

    def __init__(self, variant="hnoseg", width=8, k_max=(4, 4, 2), n_blocks=4, n_heads=2,
                 n_classes=None, epochs=30, batch_size=1, lr_max=1e-2, lr_min=1e-3,
                 augment=True, val_fraction=0.1, random_state=0):
        self.variant = variant
        self.width = width
        self.k_max = k_max
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.augment = augment
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        vols = check_volumes(X)
        if len({v.shape[0] for v in vols}) != 1:
            raise ValueError("all volumes need the same channel count")
        labels = check_label_maps(y, vols)
        seen = np.unique(np.concatenate([lab.ravel() for lab in labels]))
        n_classes = self.n_classes if self.n_classes is not None else int(seen.max()) + 1
        if seen.max() >= n_classes:
            raise ValueError(f"label {int(seen.max())} out of range for {n_classes} classes")

        config = NetworkConfig(variant=self.variant, in_channels=vols[0].shape[0],
                               n_classes=n_classes, width=self.width, k_max=self.k_max,
                               n_blocks=self.n_blocks, n_heads=self.n_heads)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                lr_max=self.lr_max, lr_min=self.lr_min,
                                val_fraction=self.val_fraction, seed=int(self.random_state))
        self.model_ = Model.build(config, seed=int(self.random_state))
        dataset = [(f"case_{i:04d}", v, lab) for i, (v, lab) in enumerate(zip(vols, labels))]
        self.history_ = train(self.model_, dataset, train_cfg, augment_data=self.augment)
        self.n_features_in_ = vols[0].shape[0]
        self.classes_ = np.arange(n_classes)
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        return [normalize_intensity(v) for v in check_volumes(X, self.n_features_in_)]

    def predict_proba(self, X) -> list:
        """Per-volume class probabilities ``(n_classes, x, y, z)``."""
        return [self.model_.predict_proba(v) for v in self._inputs(X)]

    def predict(self, X) -> list:
        """Per-volume label maps (argmax over classes)."""
        return [self.model_.predict(v) for v in self._inputs(X)]

    def predict_volume(self, v) -> np.ndarray:
        check_is_fitted(self, "model_")
        v = check_volume(v, channels=self.n_features_in_)
        return self.model_.predict(normalize_intensity(v))

    def score(self, X, y) -> float:
        """Mean foreground Dice over the given volumes."""
        preds = self.predict(X)
        labels = check_label_maps(y, check_volumes(X))
        return float(np.mean([foreground_dice(p, t) for p, t in zip(preds, labels)]))
