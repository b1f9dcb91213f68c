"""Synthetic multi-modal tumour phantoms, resolution reduction and volume files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

# Per-modality intensity change when entering each nested region (WT, TC, ET),
# loosely T1 / T1c / T2 / FLAIR-like sign patterns.
DEFAULT_CONTRAST = (
    (-0.35, -0.25, 0.10),
    (-0.20, 0.05, 0.90),
    (0.60, 0.25, -0.30),
    (0.80, -0.45, 0.05),
)
_BASE_INTENSITY = (1.0, 0.9, 0.8, 0.7)


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 16)
    n_modalities: int = 4
    radii: tuple = (0.55, 0.36, 0.2)
    contrast: tuple = DEFAULT_CONTRAST
    noise_std: float = 0.1
    count: int = 8
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.radii = tuple(float(r) for r in self.radii)
        self.contrast = tuple(tuple(float(c) for c in row) for row in self.contrast)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if len(self.radii) != 3 or not all(a > b > 0 for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError(f"radii must be strictly decreasing and positive, got {self.radii}")
        if self.radii[0] >= 0.9:
            raise ValueError("outer radius must leave room inside the grid")
        if len(self.contrast) < self.n_modalities or any(len(r) != 3 for r in self.contrast):
            raise ValueError("need a 3-entry contrast row for every modality")

    @classmethod
    def from_mapping(cls, mapping) -> PhantomSpec:
        kwargs = {}
        for key, value in mapping.items():
            if key in ("dims", "radii"):
                value = tuple(v for v in str(value).split(","))
            elif key == "contrast":
                value = tuple(tuple(r.split(",")) for r in str(value).split(";"))
            elif key in ("n_modalities", "count", "seed"):
                value = int(value)
            elif key == "noise_std":
                value = float(value)
            else:
                raise ValueError(f"unknown phantom key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class Geometry:
    """Nested ellipsoids in normalized ``[-1, 1]^3`` grid coordinates."""

    center: np.ndarray
    rotation: np.ndarray
    semi_axes: np.ndarray  # (3 regions, 3 principal axes)
    bias: list = field(default_factory=list)

    def voxel_volume(self, dims, region=0) -> float:
        """Analytic volume of one ellipsoid in voxels."""
        return 4.0 / 3.0 * math.pi * float(np.prod(self.semi_axes[region])) * float(
            np.prod(np.asarray(dims) / 2.0))


def _normalized_grid(dims):
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _draw_geometry(spec: PhantomSpec, rng) -> Geometry:
    jitter = rng.uniform(0.85, 1.15, size=3)
    semi = np.asarray(spec.radii)[:, None] * jitter[None, :]
    rotation = Rotation.random(random_state=rng).as_matrix()
    limit = max(0.95 - semi[0].max(), 0.0)
    center = rng.uniform(-limit, limit, size=3)
    bias = [(rng.integers(0, 2, size=3), rng.uniform(0, 2 * math.pi), rng.uniform(0.05, 0.15))
            for _ in range(3)]
    return Geometry(center, rotation, semi, bias)


def _labels_for(geom: Geometry, dims) -> np.ndarray:
    q = (_normalized_grid(dims) - geom.center) @ geom.rotation
    labels = np.zeros(dims, dtype=np.uint8)
    for axes in geom.semi_axes:
        labels += (np.sum((q / axes) ** 2, axis=-1) <= 1.0).astype(np.uint8)
    return labels


def generate_case(spec: PhantomSpec, index: int):
    """One phantom ``(image, labels, geometry)``, deterministic per (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(100):
        geom = _draw_geometry(spec, rng)
        labels = _labels_for(geom, spec.dims)
        if np.all(np.bincount(labels.ravel(), minlength=4)[:4] > 0):
            break
    else:
        raise ValueError(f"radii {spec.radii} too small for grid {spec.dims}")

    grid = _normalized_grid(spec.dims)
    bias = np.ones(spec.dims)
    for freq, phase, amp in geom.bias:
        bias += amp * np.cos(math.pi * grid @ freq + phase)
    image = np.empty((spec.n_modalities,) + spec.dims)
    for m in range(spec.n_modalities):
        steps = np.concatenate([[0.0], np.cumsum(spec.contrast[m])])
        image[m] = _BASE_INTENSITY[m % 4] * bias + steps[labels]
        image[m] += rng.normal(0.0, spec.noise_std, size=spec.dims)
    return image, labels, geom


def generate_phantom(spec: PhantomSpec):
    """``spec.count`` cases as ``[(image, labels), ...]``."""
    return [generate_case(spec, i)[:2] for i in range(spec.count)]


# ---------------------------------------------------------------------------
# resolution reduction


def _centres(n_out, factor, n_in):
    # input-index coordinate of each output cell centre
    return np.clip((np.arange(n_out) + 0.5) * factor - 0.5, 0, n_in - 1)


def downsample(v, factor: int, kind: str = "image"):
    """Reduce resolution by an integer factor; output dims are ``ceil(N / factor)``.

    Output voxel ``j`` samples the input at index ``(j + 0.5) * factor - 0.5``:
    trilinearly for images ``(channel, x, y, z)``, and by the containing input
    voxel for label maps ``(x, y, z)``.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    v = np.asarray(v)
    if factor == 1:
        return v.copy()
    spatial = v.shape[-3:]
    out_dims = tuple(math.ceil(n / factor) for n in spatial)
    if kind == "label":
        idx = [np.minimum(((np.arange(m) + 0.5) * factor).astype(int), n - 1)
               for m, n in zip(out_dims, spatial)]
        return v[..., idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
    if kind != "image":
        raise ValueError(f"kind must be 'image' or 'label', got {kind!r}")
    coords = [_centres(m, factor, n) for m, n in zip(out_dims, spatial)]
    return _sample_linear(v, coords)


def upsample(v, factor: int, dims):
    """Trilinear inverse of :func:`downsample` onto a grid of size ``dims``."""
    coords = [np.clip((np.arange(n) + 0.5) / factor - 0.5, 0, m - 1)
              for n, m in zip(dims, v.shape[-3:])]
    return _sample_linear(np.asarray(v, dtype=np.float64), coords)


def _sample_linear(v, coords):
    mesh = np.stack(np.meshgrid(*coords, indexing="ij"))
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        return ndimage.map_coordinates(v, mesh, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(ch, mesh, order=1, mode="nearest") for ch in v])


# ---------------------------------------------------------------------------
# volume files

VOLUME_MAGIC = b"HVOL"
VOLUME_VERSION = 1
KIND_FLOAT32 = 1
KIND_UINT8 = 2
_HEADER = struct.Struct("<4sBBBB3I")
_DTYPES = {KIND_FLOAT32: np.dtype("<f4"), KIND_UINT8: np.dtype("u1")}


class VolumeFileError(ValueError):
    pass


def encode_volume(v) -> bytes:
    """Serialize a ``(channel, x, y, z)`` (or ``(x, y, z)``) array.

    Header: ``"HVOL"``, version, element kind (1 = float32, 2 = uint8),
    channel count, reserved byte, three uint32 dims. Payload is
    channel-major with x varying fastest.
    """
    v = np.asarray(v)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise ValueError(f"expected a 3D or 4D array, got shape {v.shape}")
    if np.issubdtype(v.dtype, np.integer) or v.dtype == bool:
        if v.size and (v.min() < 0 or v.max() > 255):
            raise ValueError("label values must fit in uint8")
        kind = KIND_UINT8
    else:
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        kind = KIND_FLOAT32
    if v.shape[0] > 255:
        raise ValueError("at most 255 channels")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, kind, v.shape[0], 0, *v.shape[1:])
    payload = b"".join(np.asarray(ch, dtype=_DTYPES[kind]).tobytes(order="F") for ch in v)
    return header + payload


def decode_volume(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise VolumeFileError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, kind, channels, _, nx, ny, nz = _HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise VolumeFileError(f"bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFileError(f"unsupported volume version {version}")
    if kind not in _DTYPES:
        raise VolumeFileError(f"unknown element kind {kind}")
    dtype = _DTYPES[kind]
    expected = _HEADER.size + channels * nx * ny * nz * dtype.itemsize
    if len(data) != expected:
        raise VolumeFileError(f"payload size mismatch: expected {expected} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype=dtype, offset=_HEADER.size)
    vol = flat.reshape((channels, nz, ny, nx)).transpose(0, 3, 2, 1)
    return np.ascontiguousarray(vol)


def write_volume(v, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path) -> np.ndarray:
    """Read a volume file as ``(channel, x, y, z)``."""
    return decode_volume(Path(path).read_bytes())


def write_dataset(cases, out_dir, prefix="case") -> list:
    """Write ``[(image, labels), ...]`` as ``<prefix>_NNN_{image,label}.hvol``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (image, labels) in enumerate(cases):
        name = f"{prefix}_{i:03d}"
        write_volume(image.astype(np.float32), out_dir / f"{name}_image.hvol")
        write_volume(labels.astype(np.uint8), out_dir / f"{name}_label.hvol")
        names.append(name)
    return names


def read_dataset(data_dir):
    """Load ``[(case_id, image, labels), ...]`` written by :func:`write_dataset`."""
    data_dir = Path(data_dir)
    cases = []
    for image_path in sorted(data_dir.glob("*_image.hvol")):
        cid = image_path.name[: -len("_image.hvol")]
        label_path = data_dir / f"{cid}_label.hvol"
        if not label_path.exists():
            raise FileNotFoundError(f"missing labels for {cid}")
        image = read_volume(image_path).astype(np.float64)
        labels = read_volume(label_path)[0]
        cases.append((cid, image, labels))
    if not cases:
        raise FileNotFoundError(f"no *_image.hvol files in {data_dir}")
    return cases
