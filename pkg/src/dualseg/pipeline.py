"""End-to-end training, inference, and evaluation on phantom datasets.

Stage 1 trains the contrastive segmentation network; stage 2 freezes it and
trains the restoration segmenter plus its discriminator on corrupted inputs.
Inference keeps only the segmentation path of the stage-2 network.  Every run
writes a resolved config snapshot, per-step loss rows, and checkpoints into
its own run directory, and identical seeds reproduce identical artifacts.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import reports
from .config import AugmentCfg, TrainConfig, load_snapshot, save_snapshot
from .contrastive import ContrastiveBatch, contrastive_loss, sample_negative, sample_positive
from .errors import (
    CheckpointError,
    EmptyMaskError,
    InsufficientSamplesError,
    NoPositiveRegionError,
    ParameterError,
    RunDirError,
    ShapeError,
    SingleSourceError,
    StageIsolationError,
)
from .losses import adv_losses, lis_total_loss, rec_loss, seg_loss
from .morphology import bbox_of, centerline_mask, ring_region
from .networks import (
    BackboneSpec,
    DiscriminatorSpec,
    build_discriminator,
    build_gfs,
    build_lis,
    load_checkpoint,
    parameter_digest,
    rng_snapshot,
    save_checkpoint,
)
from .phantom import load_manifest
from .uncert import (
    FLIP_ORDER,
    FlipCode,
    UncertaintyTriple,
    blend,
    corrupt_window,
    ensemble_predict,
    threshold_mask,
    threshold_schedule,
)
from .volume import (
    NORMALIZED,
    RAW_HU,
    BBox,
    Mask,
    Volume,
    dsc,
    read_volume,
    window_normalize,
)

logger = logging.getLogger("dualseg")

LOC_FACTOR = 4

LOSS_HEADER = ("epoch", "step", "lr", "t", "l_seg", "l_con", "l_rec",
               "l_adv_g", "l_adv_d", "l_total", "skipped")

VARIANTS = ("bl", "bl_gfs", "bl_lis", "ours")


@dataclass
class Case:
    case_id: str
    source: str
    raw: Volume
    norm: Volume
    label: Mask
    split: str


@dataclass
class TrainStats:
    steps: int = 0
    contrastive_batches: int = 0
    contrastive_skips: int = 0
    corruption_events: int = 0


def load_cases(data_dir: str, split: str | None = None) -> list[Case]:
    manifest = load_manifest(data_dir)
    style = manifest["style"]["name"]
    cases = []
    for entry in manifest["cases"]:
        if split is not None and entry["split"] != split:
            continue
        raw = read_volume(os.path.join(data_dir, entry["volume"]))
        label = read_volume(os.path.join(data_dir, entry["label"]))
        if not isinstance(raw, Volume) or not isinstance(label, Mask):
            raise ShapeError(f"dataset entry {entry['id']} has wrong payload types")
        cases.append(Case(entry["id"], style, raw, window_normalize(raw),
                          label, entry["split"]))
    return cases


def load_training_cases(data_dirs: Sequence[str], split: str = "train") -> list[Case]:
    """Load one split across directories, requiring a single source style."""
    styles = [load_manifest(d)["style"]["name"] for d in data_dirs]
    if len(set(styles)) > 1:
        raise SingleSourceError(f"training data mixes source styles {sorted(set(styles))}")
    cases: list[Case] = []
    for d in data_dirs:
        cases.extend(load_cases(d, split))
    if not cases:
        raise ParameterError(f"no cases with split {split!r} under {list(data_dirs)}")
    return cases


# ---------------------------------------------------------------------------
# geometry augmentation


@dataclass(frozen=True)
class GeomDraw:
    theta_deg: float
    flip_z: bool
    flip_y: bool
    flip_x: bool


def _draw_geometry(rng: np.random.Generator, cfg: AugmentCfg) -> GeomDraw:
    theta = 0.0
    if cfg.enabled and cfg.rotate_deg > 0:
        theta = float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    flips = (False, False, False)
    if cfg.enabled and cfg.flip:
        flips = tuple(bool(rng.integers(0, 2)) for _ in range(3))
    return GeomDraw(theta, *flips)


def _source_maps(h: int, w: int, theta_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates of the inverse in-plane rotation about the slice center."""
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = ys - cy, xs - cx
    sy = cy + c * dy + s * dx
    sx = cx - s * dy + c * dx
    return sy, sx


def _gather_inplane(arr: np.ndarray, sy: np.ndarray, sx: np.ndarray,
                    order: int) -> np.ndarray:
    """Sample every slice at float source coords; out-of-range clamps to the edge."""
    h, w = arr.shape[1], arr.shape[2]
    if order == 0:
        iy = np.clip(np.rint(sy).astype(np.intp), 0, h - 1)
        ix = np.clip(np.rint(sx).astype(np.intp), 0, w - 1)
        return arr[:, iy, ix]
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0).astype(np.float32)
    fx = np.clip(sx - x0, 0.0, 1.0).astype(np.float32)
    v00 = arr[:, y0, x0]
    v01 = arr[:, y0, x1]
    v10 = arr[:, y1, x0]
    v11 = arr[:, y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype, copy=False)


def rotate_inplane(arr: np.ndarray, theta_deg: float, order: int) -> np.ndarray:
    if arr.ndim != 3:
        raise ShapeError(f"expected a 3-d array, got {arr.ndim}-d")
    if theta_deg == 0.0:
        return arr.copy()
    sy, sx = _source_maps(arr.shape[1], arr.shape[2], theta_deg)
    return _gather_inplane(arr, sy, sx, order)


def flip3(arr: np.ndarray, g: GeomDraw) -> np.ndarray:
    return FlipCode(g.flip_z, g.flip_y, g.flip_x).apply(arr)


def apply_geometry(arr: np.ndarray, g: GeomDraw, order: int) -> np.ndarray:
    """Sequential path: rotate in-plane, then flip axes."""
    return np.ascontiguousarray(flip3(rotate_inplane(arr, g.theta_deg, order), g))


def apply_geometry_composed(arr: np.ndarray, g: GeomDraw, order: int) -> np.ndarray:
    """Single-pass path: fold the flips into the rotation's gather maps."""
    if arr.ndim != 3:
        raise ShapeError(f"expected a 3-d array, got {arr.ndim}-d")
    sy, sx = _source_maps(arr.shape[1], arr.shape[2], g.theta_deg)
    if g.flip_y:
        sy, sx = sy[::-1, :], sx[::-1, :]
    if g.flip_x:
        sy, sx = sy[:, ::-1], sx[:, ::-1]
    out = _gather_inplane(arr, sy, sx, order)
    if g.flip_z:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment(x: Volume, y: Mask, rng: np.random.Generator,
            cfg: AugmentCfg | None = None) -> tuple[Volume, Mask]:
    """Shared random rotation and flips; intensity noise on the image only."""
    cfg = cfg or AugmentCfg()
    g = _draw_geometry(rng, cfg)
    xa = apply_geometry(x.voxels, g, order=1)
    ya = apply_geometry(y.voxels, g, order=0)
    if cfg.enabled and cfg.noise_sigma > 0:
        xa = xa + rng.normal(0.0, cfg.noise_sigma, xa.shape).astype(np.float32)
        if x.domain != RAW_HU:
            xa = np.clip(xa, 0.0, 1.0)
    return (Volume(xa.astype(np.float32), x.spacing, x.domain),
            Mask(ya.astype(np.uint8)))


# ---------------------------------------------------------------------------
# coarse localization


def _pool_mean(arr: np.ndarray, f: int) -> np.ndarray:
    d, h, w = arr.shape
    if d % f or h % f or w % f:
        raise ShapeError(f"grid {arr.shape} is not divisible by pool factor {f}")
    return arr.reshape(d // f, f, h // f, f, w // f, f).mean(axis=(1, 3, 5))


def _pool_max(arr: np.ndarray, f: int) -> np.ndarray:
    d, h, w = arr.shape
    if d % f or h % f or w % f:
        raise ShapeError(f"grid {arr.shape} is not divisible by pool factor {f}")
    return arr.reshape(d // f, f, h // f, f, w // f, f).max(axis=(1, 3, 5))


def pad_box_to_divisor(box: BBox, divisor: int, grid_shape: tuple[int, int, int]) -> BBox:
    """Grow the box so every side is a multiple of divisor, staying inside the grid."""
    lo, hi = list(box.lo), list(box.hi)
    for ax in range(3):
        if grid_shape[ax] % divisor:
            raise ShapeError(f"grid extent {grid_shape[ax]} not divisible by {divisor}")
        size = hi[ax] - lo[ax]
        target = ((size + divisor - 1) // divisor) * divisor
        extra = target - size
        lo[ax] -= extra // 2
        hi[ax] = lo[ax] + target
        if lo[ax] < 0:
            hi[ax] -= lo[ax]
            lo[ax] = 0
        if hi[ax] > grid_shape[ax]:
            lo[ax] -= hi[ax] - grid_shape[ax]
            hi[ax] = grid_shape[ax]
    return BBox(tuple(lo), tuple(hi))


def localizer_spec() -> BackboneSpec:
    return BackboneSpec(levels=2, base_channels=4, groups=2, in_channels=1,
                        projection_channels=4)


def train_localizer(cases: Sequence[Case], epochs: int = 40, lr: float = 1e-2):
    """Fit the low-resolution organ finder on mean-pooled volumes."""
    net = build_gfs(localizer_spec())
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        for case in cases:
            x = torch.from_numpy(_pool_mean(case.norm.voxels, LOC_FACTOR))[None, None].float()
            y = torch.from_numpy(_pool_max(case.label.voxels, LOC_FACTOR))[None, None].float()
            prob, _ = net(x)
            loss = seg_loss(prob, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


def coarse_localize(image: Volume, mode: str, margin: int, divisor: int,
                    label: Mask | None = None, localizer=None) -> BBox:
    """Bounding box around the organ, grown by margin and divisor-aligned."""
    grid = image.shape
    if mode == "oracle":
        if label is None:
            raise ParameterError("oracle localization needs the label")
        box = bbox_of(label, margin=margin, grid_shape=grid)
    elif mode == "learned":
        if localizer is None:
            raise ParameterError("learned localization needs a trained localizer")
        x = torch.from_numpy(_pool_mean(image.voxels, LOC_FACTOR))[None, None].float()
        with torch.no_grad():
            prob, _ = localizer(x)
        coarse = (prob[0, 0].numpy() >= 0.5).astype(np.uint8)
        if coarse.sum() == 0:
            logger.warning("localizer found no foreground; falling back to the full grid")
            return BBox((0, 0, 0), grid)
        small = bbox_of(Mask(coarse))
        lo = tuple(max(0, v * LOC_FACTOR - margin) for v in small.lo)
        hi = tuple(min(g, v * LOC_FACTOR + margin) for v, g in zip(small.hi, grid))
        box = BBox(lo, hi)
    else:
        raise ParameterError(f"unknown crop mode {mode!r}")
    return pad_box_to_divisor(box, divisor, grid)


def _crop(arr: np.ndarray, box: BBox) -> np.ndarray:
    return np.ascontiguousarray(arr[box.slices()])


def _uncrop(arr: np.ndarray, box: BBox, grid: tuple[int, int, int]) -> np.ndarray:
    out = np.zeros(grid, dtype=arr.dtype)
    out[box.slices()] = arr
    return out


# ---------------------------------------------------------------------------
# run directories


def prepare_run_dir(run_dir: str, force: bool = False) -> None:
    marker = os.path.join(run_dir, "config.json")
    if os.path.exists(marker) and not force:
        raise RunDirError(f"run dir {run_dir} already holds results; pass force to redo")
    for sub in ("checkpoints", "logs", "reports"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)


def _write_stats(run_dir: str, stats: TrainStats) -> None:
    path = os.path.join(run_dir, "logs", "train_stats.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(stats), fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def read_stats(run_dir: str) -> TrainStats:
    with open(os.path.join(run_dir, "logs", "train_stats.json"), encoding="utf-8") as fh:
        return TrainStats(**json.load(fh))


def _poly_lr(step: int, total: int, cfg: TrainConfig, current: float) -> float:
    factor = (1.0 - step / total) ** cfg.optim.poly_power
    if cfg.optim.compound_decay:
        return current * factor
    return cfg.optim.lr * factor


def _set_lr(optimizers: Sequence[torch.optim.Optimizer], lr: float) -> None:
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).float()[None, None]


# ---------------------------------------------------------------------------
# stage 1: contrastive segmentation training


@dataclass
class _CropSet:
    case_id: str
    norm: np.ndarray
    raw: np.ndarray
    label: np.ndarray


def _crop_cases(cases: Sequence[Case], cfg: TrainConfig, divisor: int,
                localizer=None) -> list[_CropSet]:
    crops = []
    for case in cases:
        box = coarse_localize(case.norm, cfg.crop.mode, cfg.crop.margin, divisor,
                              label=case.label, localizer=localizer)
        crops.append(_CropSet(case.case_id,
                              _crop(case.norm.voxels, box),
                              _crop(case.raw.voxels, box),
                              _crop(case.label.voxels, box)))
    return crops


def _contrastive_term(net, f_out: torch.Tensor, label_aug: np.ndarray,
                      cfg: TrainConfig, rng: np.random.Generator,
                      stats: TrainStats) -> torch.Tensor | None:
    try:
        label_mask = Mask(label_aug)
        center = centerline_mask(label_mask, dilation_radius=cfg.contrast.centerline_radius)
        radius = int(rng.integers(cfg.contrast.ring_lo, cfg.contrast.ring_hi + 1))
        ring = ring_region(label_mask, radius)
        f_proj = net.project(f_out)[0]
        pos = sample_positive(f_proj, center, cfg.contrast.patch_h, cfg.contrast.patch_w, rng)
        neg = sample_negative(f_proj, ring, cfg.contrast.patch_h, cfg.contrast.patch_w, rng)
        batch = ContrastiveBatch.from_patches(pos, neg, cfg.contrast.cap, rng)
        loss = contrastive_loss(batch, cfg.contrast.temperature)
    except (EmptyMaskError, NoPositiveRegionError, InsufficientSamplesError, ParameterError):
        stats.contrastive_skips += 1
        return None
    stats.contrastive_batches += 1
    return loss


def train_gfs(data_dirs: Sequence[str], cfg: TrainConfig, run_dir: str,
              force: bool = False) -> TrainStats:
    """Stage-1 training; writes config snapshot, loss log, and a checkpoint."""
    if cfg.stage != "gfs":
        raise ParameterError(f"expected a gfs config, got stage {cfg.stage!r}")
    cfg.validate()
    prepare_run_dir(run_dir, force)
    save_snapshot(cfg, os.path.join(run_dir, "config.json"))

    cases = load_training_cases(data_dirs, "train")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0])

    spec = cfg.backbone.to_spec(in_channels=1)
    localizer = None
    if cfg.crop.mode == "learned":
        localizer = train_localizer(cases)
    crops = _crop_cases(cases, cfg, spec.divisor, localizer)

    net = build_gfs(spec)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.optim.lr,
                           weight_decay=cfg.optim.weight_decay)
    stats = TrainStats()
    total_steps = cfg.epochs * len(crops)
    lr = cfg.optim.lr
    rows = []
    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(crops)):
            crop = crops[idx]
            g = _draw_geometry(rng, cfg.augment)
            x_aug = apply_geometry(crop.norm, g, order=1)
            y_aug = apply_geometry(crop.label, g, order=0)
            if cfg.augment.enabled and cfg.augment.noise_sigma > 0:
                noise = rng.normal(0.0, cfg.augment.noise_sigma, x_aug.shape)
                x_aug = np.clip(x_aug + noise.astype(np.float32), 0.0, 1.0)

            prob, f_out = net(_to_tensor(x_aug))
            l_seg = seg_loss(prob, _to_tensor(y_aug), eps=cfg.loss.eps)
            l_con = None
            skipped = 0
            if cfg.contrast.weight > 0:
                l_con = _contrastive_term(net, f_out, y_aug, cfg, rng, stats)
                skipped = int(l_con is None)
            total = l_seg if l_con is None else l_seg + cfg.contrast.weight * l_con

            lr = _poly_lr(stats.steps, total_steps, cfg, lr)
            _set_lr([opt], lr)
            opt.zero_grad()
            total.backward()
            opt.step()
            stats.steps += 1
            rows.append((epoch, stats.steps, lr, None,
                         float(l_seg.detach()),
                         None if l_con is None else float(l_con.detach()),
                         None, None, None, float(total.detach()), skipped))

    nets = {"gfs": net}
    if localizer is not None:
        nets["loc"] = localizer
    save_checkpoint(os.path.join(run_dir, "checkpoints", "gfs"), nets,
                    epoch=cfg.epochs, rng_state=rng_snapshot(rng),
                    extra={"stage": "gfs", "stats": dataclasses.asdict(stats)})
    reports.write_csv(os.path.join(run_dir, "logs", "losses.csv"), LOSS_HEADER, rows)
    _write_stats(run_dir, stats)
    return stats


# ---------------------------------------------------------------------------
# stage 2: restoration training under a frozen stage-1 network


def _gfs_prob_fn(gfs) -> Callable[[np.ndarray], np.ndarray]:
    def fn(arr: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            prob, _ = gfs(_to_tensor(arr))
        return prob[0, 0].numpy()

    return fn


def _verify_frozen(digest_before: str, digest_after: str) -> None:
    if digest_before != digest_after:
        raise StageIsolationError("first-stage weights changed during second-stage training")


def train_lis(data_dirs: Sequence[str], cfg: TrainConfig, run_dir: str,
              gfs_run_dir: str, force: bool = False) -> TrainStats:
    """Stage-2 training; requires a finished stage-1 run directory."""
    if cfg.stage != "lis":
        raise ParameterError(f"expected a lis config, got stage {cfg.stage!r}")
    cfg.validate()
    gfs_ckpt = os.path.join(gfs_run_dir, "checkpoints", "gfs")
    if not os.path.exists(os.path.join(gfs_ckpt, "manifest.json")):
        raise CheckpointError(
            f"stage-2 training needs a finished stage-1 checkpoint, none at {gfs_ckpt}")
    prepare_run_dir(run_dir, force)
    save_snapshot(cfg, os.path.join(run_dir, "config.json"))

    loaded, _ = load_checkpoint(gfs_ckpt)
    gfs = loaded["gfs"]
    localizer = loaded.get("loc")
    gfs.eval()
    for p in gfs.parameters():
        p.requires_grad_(False)
    digest_before = parameter_digest(gfs)

    cases = load_training_cases(data_dirs, "train")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])

    divisor = gfs.spec.divisor
    crops = _crop_cases(cases, cfg, divisor, localizer)
    prob_fn = _gfs_prob_fn(gfs)
    triples = []
    for crop in crops:
        prob, unc = ensemble_predict(prob_fn, crop.norm, k=cfg.uncert.views)
        triples.append((prob, unc))

    lis = build_lis(cfg.backbone.to_spec(in_channels=3))
    disc = build_discriminator(DiscriminatorSpec())
    opt_g = torch.optim.Adam(lis.parameters(), lr=cfg.optim.lr,
                             weight_decay=cfg.optim.weight_decay)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.optim.lr,
                             weight_decay=cfg.optim.weight_decay)

    stats = TrainStats()
    spacing = cases[0].norm.spacing
    total_steps = cfg.epochs * len(crops)
    lr = cfg.optim.lr
    rows = []
    for epoch in range(cfg.epochs):
        t = threshold_schedule(epoch, cfg.epochs, cfg.uncert.schedule_start,
                               cfg.uncert.schedule_end)
        for idx in rng.permutation(len(crops)):
            crop = crops[idx]
            prob_map, unc_map = triples[idx]
            g = _draw_geometry(rng, cfg.augment)
            norm_aug = apply_geometry(crop.norm, g, order=1)
            raw_aug = apply_geometry(crop.raw, g, order=1)
            label_aug = apply_geometry(crop.label, g, order=0)
            prob_aug = apply_geometry(prob_map, g, order=1)
            unc_aug = apply_geometry(unc_map, g, order=1)
            if cfg.augment.enabled and cfg.augment.noise_sigma > 0:
                noise = rng.normal(0.0, cfg.augment.noise_sigma, norm_aug.shape)
                norm_aug = np.clip(norm_aug + noise.astype(np.float32), 0.0, 1.0)

            m = threshold_mask(unc_aug, t)
            raw_vol = Volume(raw_aug, spacing, RAW_HU)
            i_cor = corrupt_window(raw_vol, rng,
                                   lo_range=(cfg.uncert.corrupt_lo_min, cfg.uncert.corrupt_lo_max),
                                   hi_range=(cfg.uncert.corrupt_hi_min, cfg.uncert.corrupt_hi_max),
                                   min_width=cfg.uncert.corrupt_min_width)
            stats.corruption_events += 1
            i_ori = Volume(norm_aug, spacing, NORMALIZED)
            i_per = blend(i_ori, i_cor, m)

            x = _to_tensor(i_per.voxels)
            prob_t = _to_tensor(prob_aug)
            unc_t = _to_tensor(unc_aug)
            y = _to_tensor(label_aug)
            real = _to_tensor(norm_aug)

            prob, restored = lis(x, prob_t, unc_t)
            l_seg = seg_loss(prob, y, eps=cfg.loss.eps)
            l_rec = rec_loss(restored, real, _to_tensor(m.voxels), lam=cfg.loss.rec_lambda)
            l_d, l_g = adv_losses(disc, real, restored)
            total = lis_total_loss(l_seg, l_rec, l_g, w_adv=cfg.loss.adv_weight)

            lr = _poly_lr(stats.steps, total_steps, cfg, lr)
            _set_lr([opt_g, opt_d], lr)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()
            stats.steps += 1
            rows.append((epoch, stats.steps, lr, t,
                         float(l_seg.detach()), None, float(l_rec.detach()),
                         float(l_g.detach()), float(l_d.detach()),
                         float(total.detach()), 0))

    _verify_frozen(digest_before, parameter_digest(gfs))
    nets = {"lis": lis, "disc": disc, "gfs": gfs}
    if localizer is not None:
        nets["loc"] = localizer
    save_checkpoint(os.path.join(run_dir, "checkpoints", "lis"), nets,
                    epoch=cfg.epochs, rng_state=rng_snapshot(rng),
                    extra={"stage": "lis", "gfs_run": os.path.abspath(gfs_run_dir),
                           "gfs_digest": digest_before,
                           "stats": dataclasses.asdict(stats)})
    reports.write_csv(os.path.join(run_dir, "logs", "losses.csv"), LOSS_HEADER, rows)
    _write_stats(run_dir, stats)
    return stats


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class Bundle:
    kind: str
    gfs: object
    lis: object | None
    loc: object | None
    cfg: TrainConfig


def load_bundle(run_dir: str) -> Bundle:
    cfg = load_snapshot(os.path.join(run_dir, "config.json"))
    lis_dir = os.path.join(run_dir, "checkpoints", "lis")
    gfs_dir = os.path.join(run_dir, "checkpoints", "gfs")
    if os.path.exists(os.path.join(lis_dir, "manifest.json")):
        nets, _ = load_checkpoint(lis_dir)
        bundle = Bundle("lis", nets["gfs"], nets["lis"], nets.get("loc"), cfg)
    elif os.path.exists(os.path.join(gfs_dir, "manifest.json")):
        nets, _ = load_checkpoint(gfs_dir)
        bundle = Bundle("gfs", nets["gfs"], None, nets.get("loc"), cfg)
    else:
        raise CheckpointError(f"no checkpoint under {run_dir}")
    for net in (bundle.gfs, bundle.lis, bundle.loc):
        if net is not None:
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
    return bundle


def _lis_ensemble(lis, norm: np.ndarray, prob: np.ndarray, masked_unc: np.ndarray,
                  k: int) -> tuple[np.ndarray, np.ndarray]:
    """Flip-ensemble mean and std of the stage-2 segmentation path."""
    preds = []
    for bits in FLIP_ORDER[:k]:
        code = FlipCode(*bits)
        with torch.no_grad():
            p = lis.forward_seg(_to_tensor(code.apply(norm)),
                                _to_tensor(code.apply(prob)),
                                _to_tensor(code.apply(masked_unc)))
        preds.append(code.apply(p[0, 0].numpy()))
    stack = np.stack(preds).astype(np.float64)
    mean = stack.mean(axis=0)
    unc = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    return mean.astype(np.float32), unc.astype(np.float32)


def infer_case(bundle: Bundle, norm: Volume, label: Mask | None = None,
               views: int | None = None, test_t: float | None = None,
               ) -> tuple[Mask, UncertaintyTriple, dict]:
    """Segment one volume; returns the mask, the triple, and summary numbers."""
    cfg = bundle.cfg
    k = views if views is not None else cfg.uncert.views
    t = test_t if test_t is not None else cfg.uncert.test_threshold
    divisor = bundle.gfs.spec.divisor
    box = coarse_localize(norm, cfg.crop.mode, cfg.crop.margin, divisor,
                          label=label, localizer=bundle.loc)
    crop = _crop(norm.voxels, box)

    prob_map, unc_map = ensemble_predict(_gfs_prob_fn(bundle.gfs), crop, k=k)
    if bundle.lis is not None:
        masked = (unc_map * (unc_map >= t)).astype(np.float32)
        with torch.no_grad():
            prob = bundle.lis.forward_seg(_to_tensor(crop), _to_tensor(prob_map),
                                          _to_tensor(masked))
        prob_crop = prob[0, 0].numpy()
        _, final_unc = _lis_ensemble(bundle.lis, crop, prob_map, masked, k)
    else:
        with torch.no_grad():
            p, _ = bundle.gfs(_to_tensor(crop))
        prob_crop = p[0, 0].numpy()
        final_unc = unc_map

    grid = norm.shape
    mask = Mask((_uncrop(prob_crop, box, grid) >= 0.5).astype(np.uint8))
    triple = UncertaintyTriple(_uncrop(prob_crop, box, grid),
                               _uncrop(final_unc, box, grid),
                               norm.voxels)
    report_t = cfg.uncert.report_threshold
    info = {
        "unc_count": int((triple.unc_map > report_t).sum()),
        "unc_sum": float(triple.unc_map.sum()),
    }
    return mask, triple, info


def evaluate_cases(bundle: Bundle, cases: Sequence[Case],
                   views: int | None = None, test_t: float | None = None) -> list[dict]:
    rows = []
    for case in cases:
        mask, _, info = infer_case(bundle, case.norm, label=case.label,
                                   views=views, test_t=test_t)
        rows.append({"case_id": case.case_id, "source": case.source,
                     "dsc": dsc(mask, case.label),
                     "unc_count": info["unc_count"], "unc_sum": info["unc_sum"]})
    return rows


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def eval_matrix(bundles: dict[str, Bundle], data_dirs: dict[str, str],
                out_csv: str, split: str = "test",
                views: int | None = None, test_t: float | None = None) -> list[dict]:
    """Cross-source DSC grid; single-source input degenerates to self-evaluation."""
    sources = sorted(data_dirs)
    cases = {s: load_cases(data_dirs[s], split) for s in sources}
    rows = []
    for train_src in sorted(bundles):
        targets = [s for s in sources if s != train_src] or [train_src]
        cell_means = []
        for test_src in targets:
            per_case = evaluate_cases(bundles[train_src], cases[test_src],
                                      views=views, test_t=test_t)
            cell = _mean([r["dsc"] for r in per_case])
            cell_means.append(cell)
            rows.append({"train_source": train_src, "test_source": test_src,
                         "mean_dsc": cell, "n_cases": len(per_case)})
        rows.append({"train_source": train_src, "test_source": "mean",
                     "mean_dsc": _mean(cell_means), "n_cases": len(cell_means)})
    reports.write_csv(out_csv, ("train_source", "test_source", "mean_dsc", "n_cases"),
                      [(r["train_source"], r["test_source"], r["mean_dsc"], r["n_cases"])
                       for r in rows])
    return rows


# ---------------------------------------------------------------------------
# ablation and sweeps


def train_variants(train_dirs: Sequence[str], cfg_gfs: TrainConfig,
                   cfg_lis: TrainConfig, out_dir: str, seed: int,
                   force: bool = False) -> dict[str, str]:
    """Train the four model variants for one seed; returns run dirs by variant."""
    cfg_bl = copy.deepcopy(cfg_gfs)
    cfg_bl.seed = seed
    cfg_bl.contrast.weight = 0.0
    cfg_full = copy.deepcopy(cfg_gfs)
    cfg_full.seed = seed
    runs = {v: os.path.join(out_dir, f"seed{seed}", v) for v in VARIANTS}

    bl_stats = train_gfs(train_dirs, cfg_bl, runs["bl"], force=force)
    if bl_stats.contrastive_batches != 0:
        raise StageIsolationError("plain baseline must not build contrastive batches")
    train_gfs(train_dirs, cfg_full, runs["bl_gfs"], force=force)

    cfg_l1 = copy.deepcopy(cfg_lis)
    cfg_l1.seed = seed
    cfg_l2 = copy.deepcopy(cfg_lis)
    cfg_l2.seed = seed
    train_lis(train_dirs, cfg_l1, runs["bl_lis"], gfs_run_dir=runs["bl"], force=force)
    train_lis(train_dirs, cfg_l2, runs["ours"], gfs_run_dir=runs["bl_gfs"], force=force)
    return runs


def ablate(data_dirs: dict[str, str], train_src: str, cfg_gfs: TrainConfig,
           cfg_lis: TrainConfig, out_dir: str, seeds: Sequence[int],
           force: bool = False) -> tuple[list[dict], list[dict]]:
    """Train and score all variants over seeds; writes ablation and uncertainty CSVs."""
    if train_src not in data_dirs:
        raise ParameterError(f"unknown train source {train_src!r}")
    unseen = [s for s in sorted(data_dirs) if s != train_src]
    if not unseen:
        raise ParameterError("ablation needs at least one unseen source")
    test_cases = {s: load_cases(data_dirs[s], "test") for s in unseen}

    ab_rows: list[dict] = []
    unc_rows: list[dict] = []
    for seed in seeds:
        runs = train_variants([data_dirs[train_src]], cfg_gfs, cfg_lis,
                              out_dir, seed, force=force)
        for variant in VARIANTS:
            bundle = load_bundle(runs[variant])
            for src in unseen:
                per_case = evaluate_cases(bundle, test_cases[src])
                ab_rows.append({
                    "seed": seed, "variant": variant, "test_source": src,
                    "mean_dsc": _mean([r["dsc"] for r in per_case]),
                    "mean_unc_count": _mean([r["unc_count"] for r in per_case]),
                    "n_cases": len(per_case),
                })
                for r in per_case:
                    unc_rows.append({"seed": seed, "variant": variant,
                                     "test_source": src, "case_id": r["case_id"],
                                     "unc_count": r["unc_count"],
                                     "unc_sum": r["unc_sum"]})

    rep = os.path.join(out_dir, "reports")
    reports.write_csv(os.path.join(rep, "ablation.csv"),
                      ("seed", "variant", "test_source", "mean_dsc",
                       "mean_unc_count", "n_cases"),
                      [(r["seed"], r["variant"], r["test_source"], r["mean_dsc"],
                        r["mean_unc_count"], r["n_cases"]) for r in ab_rows])
    reports.write_csv(os.path.join(rep, "uncertainty.csv"),
                      ("seed", "variant", "test_source", "case_id",
                       "unc_count", "unc_sum"),
                      [(r["seed"], r["variant"], r["test_source"], r["case_id"],
                        r["unc_count"], r["unc_sum"]) for r in unc_rows])
    means = {v: _mean([r["mean_dsc"] for r in ab_rows if r["variant"] == v])
             for v in VARIANTS}
    reports.plot_bars(list(means), [means[v] for v in VARIANTS],
                      "mean unseen-source DSC", os.path.join(rep, "ablation.png"))
    return ab_rows, unc_rows


SWEEP_PARAMS = ("t", "k")


def sweep(run_dir: str, data_dirs: dict[str, str], train_src: str, param: str,
          values: Sequence[float], out_csv: str) -> list[dict]:
    """Evaluate one trained model across test-time threshold or view-count values."""
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ParameterError("sweep needs at least one value")
    bundle = load_bundle(run_dir)
    unseen = [s for s in sorted(data_dirs) if s != train_src] or [train_src]
    cases = {s: load_cases(data_dirs[s], "test") for s in unseen}
    rows = []
    for value in values:
        if param == "t":
            kwargs = {"test_t": float(value)}
        else:
            kwargs = {"views": int(value)}
        cell_means = []
        n_total = 0
        for src in unseen:
            per_case = evaluate_cases(bundle, cases[src], **kwargs)
            cell_means.append(_mean([r["dsc"] for r in per_case]))
            n_total += len(per_case)
        rows.append({"param": param, "value": float(value),
                     "mean_dsc": _mean(cell_means), "n_cases": n_total})
    reports.write_csv(out_csv, ("param", "value", "mean_dsc", "n_cases"),
                      [(r["param"], r["value"], r["mean_dsc"], r["n_cases"])
                       for r in rows])
    return rows
