"""Centerline-guided contrastive learning: sampling, batch type, InfoNCE loss.

Positive patches are drawn per slice from the dilated-skeleton core of the
label; negative patches from the background ring around it. Flattened
patches become sample vectors; the loss pulls same-class vectors together
against a denominator built only from cross-class similarities.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    EmptyDenominatorError,
    InsufficientSamplesError,
    NoPositiveRegionError,
    ParameterError,
    ShapeError,
)
from .volume import Mask

POSITIVE = 1
NEGATIVE = 0


def _valid_centers(slice_mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Mask voxels whose h x w patch fits fully inside the slice."""
    ys, xs = np.nonzero(slice_mask)
    hh, ww = slice_mask.shape
    top, left = h // 2, w // 2
    bottom, right = h - top, w - left
    keep = (ys >= top) & (ys <= hh - bottom) & (xs >= left) & (xs <= ww - right)
    return np.stack([ys[keep], xs[keep]], axis=1) if keep.any() else np.empty((0, 2), int)


def _sample_patches(f_proj: torch.Tensor, region: Mask, h: int, w: int,
                    rng: np.random.Generator) -> tuple[torch.Tensor, list[tuple[int, int, int]]]:
    if f_proj.dim() != 4:
        raise ShapeError(f"feature map must be (C,D,H,W), got {tuple(f_proj.shape)}")
    c, d, hh, ww = f_proj.shape
    if region.shape != (d, hh, ww):
        raise ShapeError(f"region {region.shape} does not align with features {(d, hh, ww)}")
    if not (1 <= h <= hh and 1 <= w <= ww):
        raise ParameterError(f"patch {h}x{w} exceeds slice {hh}x{ww}")
    patches, centers = [], []
    for z in range(d):
        cand = _valid_centers(region.voxels[z], h, w)
        if len(cand) == 0:
            continue
        cy, cx = cand[rng.integers(0, len(cand))]
        y0, x0 = cy - h // 2, cx - w // 2
        patches.append(f_proj[:, z, y0:y0 + h, x0:x0 + w])
        centers.append((z, int(cy), int(cx)))
    if not patches:
        raise NoPositiveRegionError("no slice offers a valid patch center")
    return torch.stack(patches), centers


def sample_positive(f_proj: torch.Tensor, center_mask: Mask, h: int, w: int,
                    rng: np.random.Generator) -> torch.Tensor:
    """One patch per slice centered in the centerline-core region."""
    patches, _ = _sample_patches(f_proj, center_mask, h, w, rng)
    return patches


def sample_negative(f_proj: torch.Tensor, ring: Mask, h: int, w: int,
                    rng: np.random.Generator) -> torch.Tensor:
    """One patch per slice centered in the background ring."""
    patches, _ = _sample_patches(f_proj, ring, h, w, rng)
    return patches


@dataclass
class ContrastiveBatch:
    """2N flattened sample vectors: N tagged positive, N tagged negative."""

    samples: torch.Tensor
    tags: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.samples.dim() != 2 or len(self.tags) != self.samples.shape[0]:
            raise ShapeError("samples must be (2N, dim) with one tag per row")
        n_pos = sum(1 for t in self.tags if t == POSITIVE)
        n_neg = len(self.tags) - n_pos
        if n_pos != n_neg or n_pos < 1:
            raise InsufficientSamplesError(
                f"need equal nonzero class counts, got {n_pos} pos / {n_neg} neg")
        if not torch.isfinite(self.samples).all():
            raise ParameterError("sample vectors must be finite")
        if bool((self.samples.norm(dim=1) == 0).any()):
            raise ParameterError("sample vectors must be nonzero")

    @property
    def n(self) -> int:
        return len(self.tags) // 2

    @classmethod
    def from_patches(cls, pos: torch.Tensor, neg: torch.Tensor, cap: int,
                     rng: np.random.Generator) -> "ContrastiveBatch":
        """Flatten patches and take a random size-N subset of each class, N = min(#pos, #neg, cap)."""
        if cap < 1:
            raise ParameterError(f"cap must be >= 1, got {cap}")
        n = min(pos.shape[0], neg.shape[0], cap)
        if n < 1:
            raise InsufficientSamplesError("no patches to build a batch from")
        pos_idx = rng.permutation(pos.shape[0])[:n]
        neg_idx = rng.permutation(neg.shape[0])[:n]
        p = pos[torch.as_tensor(pos_idx, dtype=torch.long)].reshape(n, -1)
        q = neg[torch.as_tensor(neg_idx, dtype=torch.long)].reshape(n, -1)
        return cls(torch.cat([p, q]), tuple([POSITIVE] * n + [NEGATIVE] * n))


def cosine_sim(f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
    """f_i . f_j / (|f_i| |f_j|); zero vectors are degenerate."""
    ni, nj = f_i.norm(), f_j.norm()
    if float(ni) == 0.0 or float(nj) == 0.0:
        raise ParameterError("cosine similarity of a zero vector is degenerate")
    return (f_i * f_j).sum() / (ni * nj)


def info_nce(anchor_idx: int, partner_idx: int, batch: ContrastiveBatch,
             tau: float = 0.05) -> torch.Tensor:
    """-log[ exp(sim(a,p)/tau) / sum over cross-class k of exp(sim(a,k)/tau) ].

    The denominator contains only cross-class terms; the numerator pair is
    not part of it.
    """
    m = batch.samples.shape[0]
    if not (0 <= anchor_idx < m and 0 <= partner_idx < m):
        raise ParameterError("sample index out of range")
    if anchor_idx == partner_idx:
        raise ParameterError("anchor and partner must be distinct")
    if batch.tags[anchor_idx] != batch.tags[partner_idx]:
        raise ParameterError("anchor and partner must share a class")
    anchor = batch.samples[anchor_idx]
    cross = [k for k in range(m) if batch.tags[k] != batch.tags[anchor_idx]]
    if not cross:
        raise EmptyDenominatorError("no cross-class samples in batch")
    sim_pair = cosine_sim(anchor, batch.samples[partner_idx]) / tau
    sims = torch.stack([cosine_sim(anchor, batch.samples[k]) for k in cross]) / tau
    return torch.logsumexp(sims, dim=0) - sim_pair


def contrastive_loss(batch: ContrastiveBatch, tau: float = 0.05) -> torch.Tensor:
    """Mean InfoNCE over all unordered same-class pairs (both classes).

    An unordered pair contributes the average of its two anchor choices;
    the normalizer is C(N,2) * 2, the number of unordered same-class pairs.
    """
    n = batch.n
    if n < 2:
        raise InsufficientSamplesError(f"need N >= 2 for same-class pairs, got N={n}")
    x = batch.samples
    norms = x.norm(dim=1, keepdim=True)
    u = x / norms
    s = (u @ u.T) / tau
    tags = torch.as_tensor(batch.tags)
    same = tags[:, None] == tags[None, :]
    cross = ~same
    neg_inf = torch.tensor(-float("inf"), dtype=s.dtype)
    denom = torch.logsumexp(torch.where(cross, s, neg_inf), dim=1)
    losses = denom[:, None] - s
    pair_mask = same & ~torch.eye(len(tags), dtype=torch.bool)
    total = losses[pair_mask].sum() / 2.0
    return total / (math.comb(n, 2) * 2)


def dump_embeddings(path: str, pos: torch.Tensor, neg: torch.Tensor) -> None:
    """CSV of (sample_id, class_tag, per-channel spatial-mean embedding)."""
    rows = []
    for tag_name, patches in (("positive", pos), ("negative", neg)):
        means = patches.detach().reshape(patches.shape[0], patches.shape[1], -1).mean(dim=2)
        for i, vec in enumerate(means):
            rows.append([f"{tag_name[:3]}{i:04d}", tag_name]
                        + [f"{v:.6f}" for v in vec.tolist()])
    dim = len(rows[0]) - 2 if rows else 0
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "class_tag"] + [f"e{i:02d}" for i in range(dim)])
        writer.writerows(rows)
    os.replace(tmp, path)
