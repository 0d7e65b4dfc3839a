"""Segmentation, restoration, and adversarial losses.

All functions are dtype-preserving (float64 inputs give float64 losses,
which the finite-difference gradient tests rely on) and finite for any
eps-clamped inputs.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError

EPS = 1e-7


def seg_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy plus the Dice complement 1 - 2*sum(YP)/(sum(Y)+sum(P))."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    y = target.to(pred.dtype)
    p = pred.clamp(eps, 1.0 - eps)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    inter = (y * p).sum()
    denom = y.sum() + p.sum()
    if float(denom.detach()) == 0.0:
        dice_term = torch.zeros((), dtype=pred.dtype)
    else:
        dice_term = 1.0 - 2.0 * inter / denom
    return bce + dice_term


def rec_loss(restored: torch.Tensor, original: torch.Tensor, m: torch.Tensor,
             lam: float = 0.9) -> torch.Tensor:
    """Squared-error means split by the corruption mask.

    (1-lam) * mean over M=0 voxels + lam * mean over M=1 voxels; a side with
    empty support contributes 0.
    """
    if not (restored.shape == original.shape == m.shape):
        raise ShapeError(f"rec_loss shapes differ: {tuple(restored.shape)}, "
                         f"{tuple(original.shape)}, {tuple(m.shape)}")
    sq = (original - restored) ** 2
    sel = m.to(torch.bool)
    zero = torch.zeros((), dtype=restored.dtype)
    inside = sq[sel].mean() if bool(sel.any()) else zero
    outside = sq[~sel].mean() if bool((~sel).any()) else zero
    return (1.0 - lam) * outside + lam * inside


def adv_losses(d_cls: nn.Module, real: torch.Tensor,
               fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator objectives for real-vs-restored images.

    The discriminator minimizes -(E[log D(real)] + E[log(1 - D(fake))])
    with the fake detached; the generator minimizes the non-saturating
    -E[log D(fake)] with the discriminator's parameters frozen out of the
    graph, so neither update reaches the other's parameters.
    """
    d_real = d_cls(real.detach())
    d_fake = d_cls(fake.detach())
    l_d = -(torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean())

    params = [p for p in d_cls.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        l_g = -torch.log(d_cls(fake)).mean()
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    return l_d, l_g


def lis_total_loss(l_seg: torch.Tensor, l_rec: torch.Tensor, l_g: torch.Tensor,
                   w_adv: float = 0.01) -> torch.Tensor:
    """L_lis = L_seg + L_rec + w_adv * L_G."""
    return l_seg + l_rec + w_adv * l_g
