"""Flip-ensemble uncertainty, window corruption, blending, threshold schedule.

An ensemble of K axis-flip views of a volume is pushed through a frozen
segmenter; each prediction is inverse-flipped to canonical orientation, so
the voxelwise population standard deviation measures model disagreement
rather than geometry. High-uncertainty regions get their appearance
replaced by a randomly re-windowed copy, and a restoration task learns to
undo that corruption.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .volume import NORMALIZED, RAW_HU, Mask, Volume, window_normalize

# identity first, then single-axis, then double-axis, then the triple flip;
# K < 8 takes a prefix of this order
FLIP_ORDER: tuple[tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


@dataclass(frozen=True)
class FlipCode:
    """Axis-flip selector; applying the same code twice is the identity."""

    flip_z: bool
    flip_y: bool
    flip_x: bool

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = arr
        if self.flip_z:
            out = out[::-1]
        if self.flip_y:
            out = out[:, ::-1]
        if self.flip_x:
            out = out[:, :, ::-1]
        return out


@dataclass(frozen=True)
class UncertaintyTriple:
    """(probability map, uncertainty map, perturbed image) on one grid."""

    prob_map: np.ndarray
    unc_map: np.ndarray
    perturbed: np.ndarray

    def __post_init__(self) -> None:
        if not (self.prob_map.shape == self.unc_map.shape == self.perturbed.shape):
            raise ShapeError("triple members must share one shape")
        if self.prob_map.min() < 0 or self.prob_map.max() > 1:
            raise ParameterError("prob_map must lie in [0,1]")
        if self.unc_map.min() < 0 or self.unc_map.max() > 0.5 + 1e-6:
            raise ParameterError("unc_map must lie in [0, 0.5]")


def flip_views(x: np.ndarray, k: int = 8) -> list[tuple[np.ndarray, FlipCode]]:
    """The first k of the 8 flip views of x; view 0 is the identity."""
    if not (1 <= k <= 8):
        raise ParameterError(f"k must lie in [1, 8], got {k}")
    views = []
    for code_bits in FLIP_ORDER[:k]:
        code = FlipCode(*code_bits)
        views.append((code.apply(x), code))
    return views


def ensemble_predict(model: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of inverse-flipped predictions over k flip views."""
    preds = []
    for view, code in flip_views(x, k):
        p = np.asarray(model(view))
        if p.shape != x.shape:
            raise ShapeError(f"model output shape {p.shape} != input shape {x.shape}")
        if p.min() < 0 or p.max() > 1:
            raise ParameterError("model must output probabilities in [0,1]")
        preds.append(code.apply(p))
    stack = np.stack(preds).astype(np.float64)
    mean = stack.mean(axis=0)
    unc = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    return mean.astype(np.float32), unc.astype(np.float32)


def threshold_mask(unc: np.ndarray, t: float) -> Mask:
    """Binarize the uncertainty map: voxel is on iff unc >= t (inclusive)."""
    if t <= 0:
        raise ParameterError(f"threshold must be > 0, got {t}")
    return Mask((unc >= t).astype(np.uint8))


def corrupt_window(i_ori: Volume, rng: np.random.Generator,
                   raw: Volume | None = None,
                   lo_range: tuple[float, float] = (-200.0, 40.0),
                   hi_range: tuple[float, float] = (120.0, 400.0),
                   min_width: float = 80.0) -> Volume:
    """Re-window the raw intensities with a random truncation window.

    The raw (pre-normalization) channel is required: either ``i_ori`` itself
    is in the raw domain, or ``raw`` supplies it alongside a normalized
    ``i_ori``. Draws (lo', hi') are rejected until hi' - lo' >= min_width.
    """
    if i_ori.domain == RAW_HU:
        src = i_ori
    elif raw is not None and raw.domain == RAW_HU:
        if raw.shape != i_ori.shape:
            raise ShapeError(f"raw shape {raw.shape} != image shape {i_ori.shape}")
        src = raw
    else:
        raise DomainError("corrupt_window needs raw intensities (raw-domain input or raw=)")
    for _ in range(1000):
        lo = float(rng.uniform(*lo_range))
        hi = float(rng.uniform(*hi_range))
        if hi - lo >= min_width:
            return window_normalize(src, lo, hi)
    raise ParameterError("window ranges cannot satisfy the minimum width")


def blend(i_ori: Volume, i_cor: Volume, m: Mask) -> Volume:
    """Voxelwise select: (1 - M) * I_ori + M * I_cor."""
    if not (i_ori.shape == i_cor.shape == m.shape):
        raise ShapeError(f"blend shapes differ: {i_ori.shape}, {i_cor.shape}, {m.shape}")
    sel = m.voxels.astype(np.float32)
    out = (1.0 - sel) * i_ori.voxels + sel * i_cor.voxels
    return Volume(out.astype(np.float32), i_ori.spacing, i_ori.domain)


def threshold_schedule(epoch: int, total_epochs: int,
                       start: float = 0.2, end: float = 0.001) -> float:
    """Linear ramp from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if not (0 <= epoch < total_epochs):
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1 or epoch == 0:
        return start
    if epoch == total_epochs - 1:
        return end
    return start + (end - start) * epoch / (total_epochs - 1)
