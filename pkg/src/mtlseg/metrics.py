"""Volume overlap and surface-distance metrics for binary segmentations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

THRESHOLD = 0.5

# 26-connectivity for components, 6-connectivity for surfaces
_CONN26 = np.ones((3, 3, 3), dtype=bool)
_CONN6 = ndimage.generate_binary_structure(3, 1)


class NoSurfaceError(ValueError):
    """Raised when a surface distance is requested for an empty mask."""


@dataclass
class Mask3D:
    """Binary voxels ``[D, H, W]`` with spacing ``(sz, sy, sx)`` in mm."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"Mask3D needs a 3-D array, got shape {v.shape}")
        if v.size and not np.all((v == 0) | (v == 1)):
            raise ValueError("Mask3D voxels must be binary")
        self.voxels = v.astype(bool)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class SegScores:
    dice: float
    jaccard: float
    msd_mm: float
    hd_mm: float


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def stack_slices(preds, spacing) -> Mask3D:
    """Stack per-slice 2-D masks (apex to base) into a volume.

    ``spacing`` is ``(slice_thickness, sy, sx)``.
    """
    preds = [np.asarray(p) for p in preds]
    if not preds:
        raise ValueError("cannot stack an empty list of slices")
    shape = preds[0].shape
    for k, p in enumerate(preds):
        if p.shape != shape:
            raise ValueError(f"slice {k} has shape {p.shape}, expected {shape}")
    return Mask3D(np.stack(preds), spacing)


def largest_connected_component(vol: Mask3D) -> Mask3D:
    """Keep the largest 26-connected component (ties: lowest label in scan order)."""
    labels, n = ndimage.label(vol.voxels, structure=_CONN26)
    if n == 0:
        return Mask3D(np.zeros(vol.shape, dtype=bool), vol.spacing_mm)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return Mask3D(labels == keep, vol.spacing_mm)


def _check_pair(a: Mask3D, b: Mask3D) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a: Mask3D, b: Mask3D) -> float:
    _check_pair(a, b)
    sa, sb = int(a.voxels.sum()), int(b.voxels.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.voxels, b.voxels).sum()) / (sa + sb)


def jaccard(a: Mask3D, b: Mask3D) -> float:
    _check_pair(a, b)
    union = int(np.logical_or(a.voxels, b.voxels).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a.voxels, b.voxels).sum()) / union


def surface_voxels(vol: Mask3D) -> np.ndarray:
    """Physical (mm) coordinates of foreground voxels with a 6-neighbour outside the mask."""
    v = vol.voxels
    interior = ndimage.binary_erosion(v, structure=_CONN6, border_value=0)
    idx = np.argwhere(v & ~interior)
    return idx * np.asarray(vol.spacing_mm)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(dst).query(src, k=1)
    return dist


def _surfaces(a: Mask3D, b: Mask3D) -> tuple[np.ndarray, np.ndarray]:
    _check_pair(a, b)
    if a.spacing_mm != b.spacing_mm:
        raise ValueError("mask spacings differ")
    pa, pb = surface_voxels(a), surface_voxels(b)
    if len(pa) == 0 or len(pb) == 0:
        raise NoSurfaceError("no surface: surface distances are undefined for an empty mask")
    return pa, pb


def mean_surface_distance(a: Mask3D, b: Mask3D) -> float:
    """Average of the two directed mean nearest-surface distances (mm)."""
    pa, pb = _surfaces(a, b)
    return 0.5 * (float(_directed(pa, pb).mean()) + float(_directed(pb, pa).mean()))


def hausdorff(a: Mask3D, b: Mask3D) -> float:
    pa, pb = _surfaces(a, b)
    return max(float(_directed(pa, pb).max()), float(_directed(pb, pa).max()))


def evaluate_volume(pred: Mask3D, gold: Mask3D) -> SegScores:
    """Largest component of ``pred`` scored against ``gold``.

    Surface distances are NaN when either mask is empty after post-processing.
    """
    _check_pair(pred, gold)
    if pred.spacing_mm != gold.spacing_mm:
        raise ValueError("pred and gold spacings differ")
    p = largest_connected_component(pred)
    pa, pb = surface_voxels(p), surface_voxels(gold)
    if len(pa) and len(pb):
        da, db = _directed(pa, pb), _directed(pb, pa)
        msd = 0.5 * (float(da.mean()) + float(db.mean()))
        hd = max(float(da.max()), float(db.max()))
    else:
        msd = hd = float("nan")
    return SegScores(dice(p, gold), jaccard(p, gold), msd, hd)


def mask_area(mask2d, spacing) -> float:
    """Segmentation-derived area (mm^2) of one slice; ``spacing`` is ``(sx, sy)``."""
    return float(np.count_nonzero(mask2d)) * float(spacing[0]) * float(spacing[1])
