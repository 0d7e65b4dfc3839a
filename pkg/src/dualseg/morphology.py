"""Binary 3D morphology: dilation, boundary rings, skeletons, centerline masks.

The ring region around a label (dilation minus the label) supplies negative
patch centers for contrastive sampling; the dilated skeleton intersected
with the label supplies positive centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _skimage_skeletonize

from .errors import EmptyMaskError, ParameterError, ShapeError
from .volume import BBox, Mask


@dataclass(frozen=True)
class StructuringElement:
    """Ball (Euclidean, radius-inclusive) or cube (Chebyshev) neighborhood."""

    kind: str
    radius: int

    def __post_init__(self) -> None:
        if self.kind not in ("ball", "cube"):
            raise ParameterError(f"kind must be ball or cube, got {self.kind!r}")
        if self.radius < 1:
            raise ParameterError(f"radius must be >= 1, got {self.radius}")

    def footprint(self) -> np.ndarray:
        r = self.radius
        if self.kind == "cube":
            return np.ones((2 * r + 1,) * 3, dtype=bool)
        ax = np.arange(-r, r + 1)
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        return (z * z + y * y + x * x) <= r * r


def dilate(mask: Mask, element: StructuringElement) -> Mask:
    """Binary dilation by the element footprint."""
    out = ndimage.binary_dilation(mask.voxels.astype(bool), structure=element.footprint())
    return Mask(out.astype(np.uint8))


def ring_region(label: Mask, radius: int, kind: str = "ball") -> Mask:
    """Background shell within ``radius`` of the label: dilate(label) AND NOT label."""
    if radius < 1:
        raise ParameterError(f"ring radius must be >= 1, got {radius}")
    if label.count() == 0:
        raise EmptyMaskError("ring region of an empty label")
    grown = dilate(label, StructuringElement(kind, radius))
    out = np.logical_and(grown.voxels.astype(bool), ~label.voxels.astype(bool))
    return Mask(out.astype(np.uint8))


def skeletonize3d(mask: Mask) -> Mask:
    """Medial-axis thinning of a binary volume.

    The result is contained in the input, preserves the number of
    26-connected components, and is a fixed point of the operation.
    Thinning can erase a small convex component entirely; such a
    component is represented by its deepest-interior voxel instead.
    """
    if mask.count() == 0:
        raise EmptyMaskError("cannot skeletonize an empty mask")
    fg = mask.voxels.astype(bool)
    out = _skimage_skeletonize(fg)
    structure = ndimage.generate_binary_structure(3, 3)
    labels, n = ndimage.label(fg, structure=structure)
    for comp in range(1, n + 1):
        region = labels == comp
        if not out[region].any():
            dist = ndimage.distance_transform_edt(region)
            out[np.unravel_index(np.argmax(dist), dist.shape)] = True
    return Mask(out.astype(np.uint8))


def centerline_mask(label: Mask, dilation_radius: int = 2) -> Mask:
    """Dilated skeleton clipped to the label: the tube-core sampling region."""
    if dilation_radius < 1:
        raise ParameterError(f"dilation radius must be >= 1, got {dilation_radius}")
    sk = skeletonize3d(label)
    grown = dilate(sk, StructuringElement("ball", dilation_radius))
    out = np.logical_and(grown.voxels.astype(bool), label.voxels.astype(bool))
    return Mask(out.astype(np.uint8))


def bbox_of(mask: Mask, margin: int = 0, grid_shape: tuple[int, int, int] | None = None) -> BBox:
    """Tight axis-aligned box around the foreground, expanded by ``margin`` and clipped."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    if mask.count() == 0:
        raise EmptyMaskError("bbox of an empty mask")
    coords = np.argwhere(mask.voxels)
    lo = coords.min(axis=0) - margin
    hi = coords.max(axis=0) + 1 + margin
    shape = grid_shape if grid_shape is not None else mask.shape
    if len(shape) != 3:
        raise ShapeError(f"grid shape must have three entries, got {shape}")
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, shape)
    return BBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi))


def num_components(mask: Mask, connectivity: int = 3) -> int:
    """Count connected components (connectivity 3 means 26-neighborhoods)."""
    structure = ndimage.generate_binary_structure(3, connectivity)
    _, n = ndimage.label(mask.voxels, structure=structure)
    return int(n)
