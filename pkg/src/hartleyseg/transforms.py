"""3D discrete Hartley and Fourier transforms with band truncation.

All transforms act on the last three axes of an array, so a leading channel
axis (or any number of leading axes) is carried along untouched.

Normalization conventions
-------------------------
``"forward"``
    The forward transform divides by the voxel count and the inverse is an
    unscaled sum. The DC coefficient is then the channel mean, which keeps
    band-limited coefficients comparable across grid resolutions.
``"none"``
    The forward transform is an unscaled sum and the inverse divides by the
    voxel count.

In both cases the product of the forward and inverse scalings is
``1 / (Nx * Ny * Nz)``.

Banded layout
-------------
A band-truncated spectrum stores, per axis, the frequency indices
``[0, k_max)`` followed by ``[N - k_max, N)``. Spectral weights are stored in
the same order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

AXES = (-3, -2, -1)

Norm = Literal["forward", "none"]


@dataclass(frozen=True)
class GridSpec:
    """Spatial grid size and the retained frequency cutoff per axis."""

    dims: tuple[int, int, int]
    k_max: tuple[int, int, int] | None = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be a positive triple, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.k_max is not None:
            k_max = tuple(int(k) for k in self.k_max)
            if len(k_max) != 3:
                raise ValueError("k_max must be a triple")
            check_band(dims, k_max)
            object.__setattr__(self, "k_max", k_max)

    @property
    def band_shape(self) -> tuple[int, int, int]:
        if self.k_max is None:
            return self.dims
        return tuple(2 * k for k in self.k_max)


@dataclass
class SpectralField:
    """Hartley (real) or Fourier (complex) coefficients of a volume."""

    data: np.ndarray
    layout: Literal["full", "banded"]
    grid: GridSpec
    kind: Literal["hartley", "fourier"] = "hartley"

    def __post_init__(self):
        expected = self.grid.dims if self.layout == "full" else self.grid.band_shape
        if self.layout not in ("full", "banded"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if tuple(self.data.shape[-3:]) != tuple(expected):
            raise ValueError(
                f"{self.layout} spectrum must end in shape {expected}, "
                f"got {self.data.shape}"
            )


def check_band(dims, k_max) -> None:
    """Validate a cutoff against a grid size; raises ``ValueError``."""
    for n, k in zip(dims, k_max):
        if n < 1 or k < 1:
            raise ValueError(f"dims and k_max must be positive, got {dims}, {k_max}")
        if 2 * k > n:
            raise ValueError(f"cutoff {k_max} exceeds half the grid {dims}")


def _scale(shape, norm: Norm, inverse: bool) -> float:
    n = float(np.prod(shape[-3:]))
    if norm == "forward":
        return 1.0 if inverse else 1.0 / n
    if norm == "none":
        return 1.0 / n if inverse else 1.0
    raise ValueError(f"unknown normalization {norm!r}")


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("transform input contains non-finite values")


def dht(x: np.ndarray, norm: Norm = "forward", inverse: bool = False) -> np.ndarray:
    """Hartley transform of the last three axes of a real array.

    Computed as ``Re(F) - Im(F)`` of the separable FFT. The DHT is its own
    inverse up to scaling, so ``inverse`` only changes the scale factor.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("expected an array with at least three axes")
    _check_finite(x)
    spec = np.fft.fftn(x, axes=AXES)
    return (spec.real - spec.imag) * _scale(x.shape, norm, inverse)


def dft(x: np.ndarray, norm: Norm = "forward") -> np.ndarray:
    """Complex Fourier transform of the last three axes."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError("expected an array with at least three axes")
    _check_finite(x)
    return np.fft.fftn(x, axes=AXES) * _scale(x.shape, norm, inverse=False)


def idft(spec: np.ndarray, norm: Norm = "forward") -> np.ndarray:
    """Inverse of :func:`dft`; returns a complex array."""
    spec = np.asarray(spec)
    _check_finite(spec)
    # np.fft.ifftn divides by N; undo it and apply the convention's scale
    n = float(np.prod(spec.shape[-3:]))
    return np.fft.ifftn(spec, axes=AXES) * n * _scale(spec.shape, norm, inverse=True)


def band_indices(n: int, k: int) -> np.ndarray:
    """Full-layout indices of a two-sided band, in banded storage order."""
    return np.concatenate([np.arange(k), np.arange(n - k, n)])


def band_reflection(m: int) -> np.ndarray:
    """Banded position of the frequency ``N - k`` for every banded position.

    The band is treated as its own ``2*k_max``-periodic frequency domain, so
    the lone ``-k_max`` entry pairs with itself. On a full band this is the
    ordinary ``(N - k) mod N`` map.
    """
    return (-np.arange(m)) % m


def truncate_array(x: np.ndarray, k_max) -> np.ndarray:
    dims = x.shape[-3:]
    check_band(dims, k_max)
    ix, iy, iz = (band_indices(n, k) for n, k in zip(dims, k_max))
    return x[..., ix[:, None, None], iy[None, :, None], iz[None, None, :]]


def pad_array(x: np.ndarray, dims) -> np.ndarray:
    band = x.shape[-3:]
    if any(b % 2 for b in band):
        raise ValueError(f"banded extents must be even, got {band}")
    k_max = tuple(b // 2 for b in band)
    check_band(dims, k_max)
    out = np.zeros(x.shape[:-3] + tuple(dims), dtype=x.dtype)
    ix, iy, iz = (band_indices(n, k) for n, k in zip(dims, k_max))
    out[..., ix[:, None, None], iy[None, :, None], iz[None, None, :]] = x
    return out


def dht3(v: np.ndarray, norm: Norm = "forward", k_max=None) -> SpectralField:
    """Forward Hartley transform of a ``(channel, x, y, z)`` volume."""
    v = np.asarray(v, dtype=np.float64)
    dims = v.shape[-3:]
    return SpectralField(dht(v, norm), "full", GridSpec(dims, k_max))


def idht3(field: SpectralField, norm: Norm = "forward") -> np.ndarray:
    if field.layout != "full":
        raise ValueError("idht3 needs a full-layout spectrum; pad() it first")
    if field.kind != "hartley":
        raise ValueError("idht3 needs a Hartley spectrum")
    return dht(field.data, norm, inverse=True)


def dft3(v: np.ndarray, norm: Norm = "forward", k_max=None) -> SpectralField:
    v = np.asarray(v, dtype=np.float64)
    dims = v.shape[-3:]
    return SpectralField(dft(v, norm), "full", GridSpec(dims, k_max), "fourier")


def idft3(field: SpectralField, norm: Norm = "forward") -> np.ndarray:
    """Inverse Fourier transform; returns the real part."""
    if field.layout != "full":
        raise ValueError("idft3 needs a full-layout spectrum; pad() it first")
    return idft(field.data, norm).real


def truncate(field: SpectralField, k_max=None) -> SpectralField:
    """Keep the two-sided low-frequency band ``[0, k) + [N-k, N)`` per axis."""
    if field.layout != "full":
        raise ValueError("truncate expects a full-layout spectrum")
    grid = GridSpec(field.grid.dims, k_max or field.grid.k_max)
    if grid.k_max is None:
        raise ValueError("truncate needs a cutoff")
    return SpectralField(truncate_array(field.data, grid.k_max), "banded", grid, field.kind)


def pad(field: SpectralField, dims=None) -> SpectralField:
    """Zero-fill a banded spectrum back to a full grid (possibly a larger one)."""
    if field.layout != "banded":
        raise ValueError("pad expects a banded spectrum")
    dims = tuple(dims or field.grid.dims)
    grid = GridSpec(dims, field.grid.k_max)
    return SpectralField(pad_array(field.data, dims), "full", grid, field.kind)

