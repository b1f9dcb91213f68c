"""Hartley neural-operator segmentation of 3D volumes (HNOSeg, HartleyMHA, FNO baseline)."""

from .estimator import HartleySegmenter
from .networks import Model, NetworkConfig, count_params
from .transforms import GridSpec, SpectralField, dft3, dht3, idft3, idht3, pad, truncate

__all__ = [
    "GridSpec",
    "HartleySegmenter",
    "Model",
    "NetworkConfig",
    "SpectralField",
    "count_params",
    "dft3",
    "dht3",
    "idft3",
    "idht3",
    "pad",
    "truncate",
]

__version__ = "0.1.0"
