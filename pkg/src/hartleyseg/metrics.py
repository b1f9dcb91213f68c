"""Dice and 95th-percentile Hausdorff distance over nested label regions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: frozenset

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(int(v) for v in self.labels))
        if not self.labels:
            raise ValueError(f"region {self.name!r} has no labels")

    def mask(self, label_map):
        return np.isin(label_map, list(self.labels))


# whole tumour, tumour core and enhancing tumour analogues
NESTED_REGIONS = (
    RegionSpec("WT", {1, 2, 3}),
    RegionSpec("TC", {2, 3}),
    RegionSpec("ET", {3}),
)


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def surface(mask) -> np.ndarray:
    """Voxels removed by one 6-connected erosion (grid border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def nearest_rank(values, q: float = 95.0) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    values = np.sort(np.asarray(values, dtype=float))
    rank = max(int(math.ceil(q / 100.0 * len(values))), 1)
    return float(values[rank - 1])


def directed_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    spacing = np.asarray(spacing, dtype=float)
    pa = np.argwhere(surface(a)) * spacing
    pb = np.argwhere(surface(b)) * spacing
    dist, _ = cKDTree(pb).query(pa)
    return np.asarray(dist, dtype=float)


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile surface distances (mm).

    Two empty masks give 0; a single empty mask gives the grid diagonal.
    """
    pred, gt = _pair(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return grid_diagonal(pred.shape, spacing)
    forward = nearest_rank(directed_surface_distances(pred, gt, spacing))
    backward = nearest_rank(directed_surface_distances(gt, pred, spacing))
    return max(forward, backward)


def grid_diagonal(shape, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.sqrt(np.sum((np.asarray(shape, float) * np.asarray(spacing, float)) ** 2)))


def region_metrics(pred_labels, gt_labels, regions=NESTED_REGIONS, spacing=(1.0, 1.0, 1.0)):
    """``{region name: (dice, hd95)}`` after binarizing each region."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label maps differ in shape: {pred_labels.shape} vs {gt_labels.shape}")
    known = {0}.union(*(r.labels for r in regions))
    for name, arr in (("prediction", pred_labels), ("ground truth", gt_labels)):
        unknown = set(np.unique(arr).tolist()) - known
        if unknown:
            raise ValueError(f"{name} has unknown label values {sorted(unknown)}")
    out = {}
    for region in regions:
        p, g = region.mask(pred_labels), region.mask(gt_labels)
        out[region.name] = (dice(p, g), hd95(p, g, spacing))
    return out


def foreground_dice(pred_labels, gt_labels) -> float:
    """Dice of the binary foreground (any non-zero label)."""
    return dice(np.asarray(pred_labels) > 0, np.asarray(gt_labels) > 0)


def mean_region_dice(pred_labels, gt_labels, regions=NESTED_REGIONS) -> float:
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    return float(np.mean([dice(r.mask(pred_labels), r.mask(gt_labels)) for r in regions]))


def parse_regions(text: str):
    """Parse ``"WT:1,2,3;TC:2,3;ET:3"`` into region specs."""
    regions = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, labels = part.partition(":")
        regions.append(RegionSpec(name.strip(), {int(v) for v in labels.split(",") if v.strip()}))
    if not regions:
        raise ValueError("no regions given")
    return tuple(regions)


def format_table(results) -> str:
    """Dice / HD95 table, one row per prediction, columns per region."""
    rows = list(results.items())
    names = list(rows[0][1]) if rows else []
    header = ["case"] + [f"Dice {n}" for n in names] + [f"HD95 {n}" for n in names]
    lines = [" | ".join(header)]
    for case, metrics in rows:
        cells = [case] + [f"{metrics[n][0] * 100:.1f}" for n in names]
        cells += [f"{metrics[n][1]:.2f}" for n in names]
        lines.append(" | ".join(cells))
    return "\n".join(lines)
