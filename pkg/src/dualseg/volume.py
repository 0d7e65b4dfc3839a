"""Core volume types, intensity windowing, resampling, overlap metrics, and DSV1 I/O.

Axis order is (D, H, W) everywhere; axis 0 indexes slices. A ``Volume``
carries float32 voxels plus physical spacing and an intensity domain tag;
a ``Mask`` carries binary uint8 voxels. Volumes and masks round-trip
bit-exactly through the DSV1 container (little-endian: magic ``DSV1``,
u8 dtype code 0=float32/1=uint8-mask, three u32 dims, three f32 spacing,
row-major payload) with a JSON sidecar for metadata.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DomainError, FormatError, ParameterError, ShapeError

RAW_HU = "raw_hu"
NORMALIZED = "normalized_unit"

IntensityDomain = Literal["raw_hu", "normalized_unit"]

_MAGIC = b"DSV1"
_DTYPE_F32 = 0
_DTYPE_MASK = 1
_HEADER = struct.Struct("<4sB3I3f")


@dataclass(frozen=True, eq=False)
class Volume:
    """A scalar 3D image with physical spacing and an intensity domain tag."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: str = RAW_HU

    def __post_init__(self) -> None:
        v = self.voxels
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive dims, got {v.shape}")
        if v.dtype != np.float32:
            raise ShapeError(f"volume voxels must be float32, got {v.dtype}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacing must be three positive floats, got {self.spacing}")
        if self.domain not in (RAW_HU, NORMALIZED):
            raise DomainError(f"unknown intensity domain {self.domain!r}")
        if self.domain == NORMALIZED:
            lo, hi = float(v.min()), float(v.max())
            if lo < 0.0 or hi > 1.0:
                raise DomainError(f"normalized volume outside [0,1]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Mask:
    """A binary 3D label map (uint8 values 0/1)."""

    voxels: np.ndarray

    def __post_init__(self) -> None:
        v = self.voxels
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"mask must be 3D with positive dims, got {v.shape}")
        if v.dtype != np.uint8:
            raise ShapeError(f"mask voxels must be uint8, got {v.dtype}")
        bad = (v > 1).any()
        if bad:
            raise ParameterError("mask voxels must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.voxels.sum())


@dataclass(frozen=True)
class BBox:
    """Half-open axis-aligned box: voxel i is inside iff lo[a] <= i[a] < hi[a]."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ShapeError("bbox lo/hi must have three entries")
        if any(l < 0 for l in self.lo) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ParameterError(f"invalid bbox lo={self.lo} hi={self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]

    def contains(self, other: "BBox") -> bool:
        return all(sl <= ol and oh <= sh for sl, ol, oh, sh in zip(self.lo, other.lo, other.hi, self.hi))

    def clipped(self, grid_shape: tuple[int, int, int]) -> "BBox":
        lo = tuple(max(0, l) for l in self.lo)
        hi = tuple(min(g, h) for g, h in zip(grid_shape, self.hi))
        return BBox(lo, hi)  # type: ignore[arg-type]


def window_normalize(vol: Volume, lo: float = -100.0, hi: float = 240.0) -> Volume:
    """Map intensities through the window [lo, hi] to [0, 1] with clamping.

    Monotone non-decreasing in the input; windowing an already
    normalized volume with (0, 1) is the identity.
    """
    if hi <= lo:
        raise ParameterError(f"window requires hi > lo, got ({lo}, {hi})")
    out = (vol.voxels - np.float32(lo)) / np.float32(hi - lo)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Volume(out, vol.spacing, NORMALIZED)


def _grid_coords(n_in: int, n_out: int, s_in: float, s_out: float) -> np.ndarray:
    c = np.arange(n_out, dtype=np.float64) * (s_out / s_in)
    return np.clip(c, 0.0, n_in - 1)


def _resample_array(arr: np.ndarray, spacing: tuple[float, float, float],
                    target: tuple[float, float, float], order: int) -> np.ndarray:
    shape_out = tuple(max(1, round(n * s / t)) for n, s, t in zip(arr.shape, spacing, target))
    if shape_out == arr.shape and tuple(spacing) == tuple(target):
        return arr.copy()
    axes = [_grid_coords(arr.shape[a], shape_out[a], spacing[a], target[a]) for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    if order == 0:
        idx = [np.rint(g).astype(np.intp) for g in grid]
        return arr[idx[0], idx[1], idx[2]]
    from scipy.ndimage import map_coordinates

    coords = np.stack([g.ravel() for g in grid])
    out = map_coordinates(arr.astype(np.float64), coords, order=1, mode="nearest")
    return out.reshape(shape_out)


def resample(vol: Volume, target_spacing: tuple[float, float, float],
             mode: str = "trilinear") -> Volume:
    """Resample onto a new spacing; output extent matches input within one voxel per axis."""
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ParameterError(f"target spacing must be three positive floats, got {target_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise ParameterError(f"mode must be trilinear or nearest, got {mode!r}")
    order = 1 if mode == "trilinear" else 0
    out = _resample_array(vol.voxels, vol.spacing, tuple(target_spacing), order)
    out = out.astype(np.float32)
    if vol.domain == NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return Volume(out, tuple(target_spacing), vol.domain)  # type: ignore[arg-type]


def resample_mask(mask: Mask, spacing: tuple[float, float, float],
                  target_spacing: tuple[float, float, float]) -> Mask:
    """Nearest-neighbor mask resampling; output stays strictly binary."""
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ParameterError(f"spacing must be three positive floats, got {spacing}")
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ParameterError(f"target spacing must be three positive floats, got {target_spacing}")
    out = _resample_array(mask.voxels, tuple(spacing), tuple(target_spacing), 0)
    return Mask(out.astype(np.uint8))


def dsc(pred: Mask, gt: Mask) -> float:
    """Dice coefficient 2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = pred.voxels.astype(bool)
    b = gt.voxels.astype(bool)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def _sidecar_path(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def write_volume(obj: Volume | Mask, path: str, metadata: dict | None = None,
                 spacing: tuple[float, float, float] | None = None) -> None:
    """Write a Volume or Mask as DSV1 plus a JSON sidecar (atomic rename).

    Masks carry no spacing of their own; pass ``spacing`` to record the
    paired volume's, else (1,1,1) is written.
    """
    if isinstance(obj, Volume):
        code, payload, sp = _DTYPE_F32, obj.voxels.astype("<f4", copy=False), obj.spacing
        side = {"intensity_domain": obj.domain}
    elif isinstance(obj, Mask):
        code, payload = _DTYPE_MASK, obj.voxels
        sp = spacing if spacing is not None else (1.0, 1.0, 1.0)
        side = {}
    else:
        raise ParameterError(f"cannot serialize {type(obj).__name__}")
    side.update(metadata or {})
    d, h, w = payload.shape
    header = _HEADER.pack(_MAGIC, code, d, h, w, *[float(s) for s in sp])
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(payload).tobytes())
    os.replace(tmp, path)
    side_tmp = _sidecar_path(path) + ".tmp"
    with open(side_tmp, "w", encoding="utf-8") as f:
        json.dump(side, f, indent=2, sort_keys=True)
    os.replace(side_tmp, _sidecar_path(path))


def read_volume(path: str) -> Volume | Mask:
    """Read a DSV1 file back into a Volume or Mask (dtype code decides)."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, code, d, h, w, s0, s1, s2 = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        n = d * h * w
        payload = f.read()
    side = {}
    sp = _sidecar_path(path)
    if os.path.exists(sp):
        with open(sp, encoding="utf-8") as f:
            side = json.load(f)
    if code == _DTYPE_F32:
        if len(payload) != 4 * n:
            raise FormatError(f"{path}: payload size {len(payload)} != {4 * n}")
        vox = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
        domain = side.get("intensity_domain", RAW_HU)
        return Volume(vox, (s0, s1, s2), domain)
    if code == _DTYPE_MASK:
        if len(payload) != n:
            raise FormatError(f"{path}: payload size {len(payload)} != {n}")
        vox = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
        return Mask(vox)
    raise FormatError(f"{path}: unknown dtype code {code}")


def read_sidecar(path: str) -> dict:
    """Return the JSON sidecar for a DSV1 file ({} when absent)."""
    sp = _sidecar_path(path)
    if not os.path.exists(sp):
        return {}
    with open(sp, encoding="utf-8") as f:
        return json.load(f)
