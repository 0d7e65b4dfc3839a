"""Synthetic 64^3 phantoms: a curved tubular organ in textured background.

Geometry (organ curve, distractor blobs) is drawn from a seed-derived
geometry stream; appearance (lesions, contrast, blur, noise, window remap)
from a separate style stream. Two styles given the same seed therefore
produce identical labels under different appearance, which is what makes
train-on-one-style / test-on-another a controlled domain-shift experiment.

Raw intensities live on an HU-like scale; the normalized channel is exactly
``window_normalize(raw, -100, 240)``.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .morphology import num_components
from .volume import Mask, Volume, window_normalize, write_volume

WINDOW_LO = -100.0
WINDOW_HI = 240.0


@dataclass(frozen=True)
class SourceStyle:
    """Appearance parameters of one acquisition source.

    noise_sigma and contrast_bias are in HU; blur_sigma in voxels;
    window_jitter is the half-range of the per-case acquisition-window
    shift in HU; tumor_rate is the probability that a case grows bright
    intra-organ lesions (appearance only, labels untouched).
    """

    name: str
    noise_sigma: float = 6.0
    contrast_gain: float = 1.0
    contrast_bias: float = 0.0
    blur_sigma: float = 0.0
    window_jitter: float = 0.0
    tumor_rate: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.tumor_rate <= 1.0):
            raise ParameterError(f"tumor_rate must lie in [0,1], got {self.tumor_rate}")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.window_jitter < 0:
            raise ParameterError("noise_sigma, blur_sigma, window_jitter must be >= 0")
        if self.contrast_gain <= 0:
            raise ParameterError(f"contrast_gain must be > 0, got {self.contrast_gain}")


STYLES: dict[str, SourceStyle] = {
    "srcA": SourceStyle("srcA", noise_sigma=6.0),
    "srcB": SourceStyle("srcB", noise_sigma=14.0, contrast_gain=0.55, contrast_bias=20.0,
                        blur_sigma=0.8, window_jitter=60.0),
    "srcC": SourceStyle("srcC", noise_sigma=10.0, contrast_gain=0.8, contrast_bias=-15.0,
                        blur_sigma=0.4, window_jitter=40.0, tumor_rate=0.7),
}


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and base-intensity parameters of the phantom population.

    grid              cubic volume edge in voxels
    organ_mean        organ base intensity (HU)
    background_mean   background base intensity (HU)
    radius_head/body/tail
                      tube radius profile along the curve (head > body > tail)
    curve_span        control-point half-extent along the main axis (voxels)
    curve_wobble      control-point half-extent across the main axis (voxels)
    n_distractors     background blobs with intensity overlapping the organ
    """

    grid: int = 64
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_mean: float = 90.0
    organ_texture: float = 8.0
    background_mean: float = 30.0
    background_texture: float = 12.0
    radius_head: float = 6.0
    radius_body: float = 4.0
    radius_tail: float = 2.0
    curve_span: float = 6.0
    curve_wobble: float = 3.5
    n_distractors: int = 3
    distractor_radius: tuple[float, float] = (2.0, 5.0)
    distractor_mean: tuple[float, float] = (60.0, 130.0)
    lesion_mean: float = 170.0
    lesion_radius: tuple[float, float] = (1.5, 3.0)

    def __post_init__(self) -> None:
        if self.grid < 32:
            raise ParameterError(f"grid must be >= 32, got {self.grid}")
        if not (self.radius_head > self.radius_body > self.radius_tail >= 1.0):
            raise ParameterError("radius profile must satisfy head > body > tail >= 1")


def _bezier(ctrl: np.ndarray, n: int = 200) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    b = ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1]
         + 3 * (1 - t) * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])
    return b


def _radius_profile(spec: PhantomSpec, n: int = 200) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    return np.interp(t, [0.0, 0.5, 1.0], [spec.radius_head, spec.radius_body, spec.radius_tail])


def _voxelize_tube(spec: PhantomSpec, pts: np.ndarray, radii: np.ndarray) -> np.ndarray:
    g = spec.grid
    lo = np.maximum(np.floor(pts.min(axis=0) - radii.max() - 1).astype(int), 0)
    hi = np.minimum(np.ceil(pts.max(axis=0) + radii.max() + 2).astype(int), g)
    zz, yy, xx = np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij")
    vox = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1).astype(np.float32)
    d = np.linalg.norm(vox[:, None, :] - pts[None, :, :].astype(np.float32), axis=2)
    inside = (d - radii[None, :].astype(np.float32) <= 0.0).any(axis=1)
    label = np.zeros((g, g, g), dtype=np.uint8)
    label[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside.reshape(zz.shape)
    return label


def _organ_geometry(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    g = spec.grid
    margin = spec.radius_head + 3.0
    center = rng.uniform(g / 2 - 4, g / 2 + 4, size=3)
    main = int(rng.integers(0, 3))
    ctrl = np.empty((4, 3))
    for i in range(4):
        offset = rng.uniform(-spec.curve_wobble, spec.curve_wobble, size=3)
        offset[main] = (i / 3.0 - 0.5) * 2.0 * spec.curve_span + rng.uniform(-1.0, 1.0)
        ctrl[i] = center + offset
    return np.clip(ctrl, margin, g - 1 - margin)


def _soft_ball(base: np.ndarray, center: np.ndarray, radius: float, amplitude: float) -> None:
    g = base.shape[0]
    r_ext = radius + 2.0
    lo = np.maximum(np.floor(center - r_ext).astype(int), 0)
    hi = np.minimum(np.ceil(center + r_ext + 1).astype(int), g)
    zz, yy, xx = np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij")
    d = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
    profile = 1.0 / (1.0 + np.exp((d - radius) * 3.0))
    base[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += amplitude * profile


def _smooth_field(rng: np.random.Generator, g: int, corr: float, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((g, g, g)), corr)
    std = field.std()
    if std > 0:
        field *= sigma / std
    return field


def gen_phantom(spec: PhantomSpec, style: SourceStyle, seed: int) -> tuple[Volume, Volume, Mask]:
    """Generate one case: (raw HU volume, normalized volume, label mask).

    Deterministic in (spec, style, seed). The label is style-independent;
    the organ is one 26-connected component strictly interior to the grid.
    """
    g = spec.grid
    for attempt in range(8):
        rng_geom = np.random.default_rng([seed, attempt, 0])
        ctrl = _organ_geometry(spec, rng_geom)
        pts = _bezier(ctrl)
        radii = _radius_profile(spec)
        label_arr = _voxelize_tube(spec, pts, radii)
        border = np.zeros_like(label_arr, dtype=bool)
        border[0], border[-1] = True, True
        border[:, 0], border[:, -1] = True, True
        border[:, :, 0], border[:, :, -1] = True, True
        label = Mask(label_arr)
        if label.count() > 0 and not (label_arr.astype(bool) & border).any() \
                and num_components(label) == 1:
            break
    else:
        raise ParameterError(f"no valid organ geometry for seed {seed}")

    base = np.full((g, g, g), spec.background_mean, dtype=np.float64)
    base += _smooth_field(rng_geom, g, 3.0, spec.background_texture)
    organ_tex = spec.organ_mean + _smooth_field(rng_geom, g, 2.0, spec.organ_texture)
    fg = label_arr.astype(bool)
    base[fg] = organ_tex[fg]

    keepout = ndimage.binary_dilation(fg, iterations=2)
    for _ in range(spec.n_distractors):
        for _ in range(40):
            c = rng_geom.uniform(4, g - 4, size=3)
            r = rng_geom.uniform(*spec.distractor_radius)
            ci = tuple(int(round(v)) for v in c)
            if not keepout[ci]:
                mean = rng_geom.uniform(*spec.distractor_mean)
                _soft_ball(base, c, r, mean - spec.background_mean)
                break

    rng_style = np.random.default_rng([seed, 1000 + attempt, _style_key(style)])
    raw = base.copy()
    if rng_style.random() < style.tumor_rate:
        interior = ndimage.binary_erosion(fg, iterations=2)
        pool = np.argwhere(interior if interior.any() else fg)
        for _ in range(int(rng_style.integers(1, 4))):
            c = pool[rng_style.integers(0, len(pool))].astype(float)
            r = rng_style.uniform(*spec.lesion_radius)
            _soft_ball(raw, c, r, spec.lesion_mean - spec.organ_mean)

    pivot = 0.5 * (spec.organ_mean + spec.background_mean)
    raw = (raw - pivot) * style.contrast_gain + pivot + style.contrast_bias
    if style.blur_sigma > 0:
        raw = ndimage.gaussian_filter(raw, style.blur_sigma)
    if style.noise_sigma > 0:
        raw += rng_style.normal(0.0, style.noise_sigma, size=raw.shape)
    if style.window_jitter > 0:
        dlo = rng_style.uniform(-style.window_jitter, style.window_jitter)
        dhi = rng_style.uniform(-style.window_jitter, style.window_jitter)
        lo_j, hi_j = WINDOW_LO + dlo, WINDOW_HI + dhi
        span = WINDOW_HI - WINDOW_LO
        raw = (raw - lo_j) / (hi_j - lo_j) * span + WINDOW_LO

    raw_vol = Volume(raw.astype(np.float32), spec.spacing)
    normalized = window_normalize(raw_vol, WINDOW_LO, WINDOW_HI)
    return raw_vol, normalized, label


def _style_key(style: SourceStyle) -> int:
    return zlib.crc32(style.name.encode("utf-8"))


def organ_mean_intensity(normalized: Volume, label: Mask) -> float:
    """Mean normalized intensity over the organ voxels."""
    return float(normalized.voxels[label.voxels.astype(bool)].mean())


def style_gap(spec: PhantomSpec, style_a: SourceStyle, style_b: SourceStyle,
              seeds: range) -> float:
    """Absolute difference of mean organ intensity between two styles over seeds."""
    means = []
    for s in (style_a, style_b):
        vals = [organ_mean_intensity(gen_phantom(spec, s, k)[1], gen_phantom(spec, s, k)[2])
                for k in seeds]
        means.append(float(np.mean(vals)))
    return abs(means[0] - means[1])


def gen_dataset(spec: PhantomSpec, style: SourceStyle, n: int, master_seed: int,
                out_dir: str, n_val: int = 0, n_test: int = 0) -> dict:
    """Write ``n`` cases plus a manifest; returns the manifest dict.

    Case ``i`` uses seed ``master_seed + i``. Splits are assigned from the
    tail: the last ``n_test`` cases are test, the ``n_val`` before them val.
    """
    if n < 0 or n_val < 0 or n_test < 0 or n_val + n_test > n:
        raise ParameterError(f"bad split sizes n={n} n_val={n_val} n_test={n_test}")
    os.makedirs(out_dir, exist_ok=True)
    if n > 0:
        os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    cases = []
    for i in range(n):
        seed = master_seed + i
        raw, _, label = gen_phantom(spec, style, seed)
        cid = f"case{i:04d}"
        vol_rel = os.path.join("volumes", cid + ".dsv")
        lab_rel = os.path.join("labels", cid + ".dsv")
        write_volume(raw, os.path.join(out_dir, vol_rel),
                     metadata={"case": cid, "seed": seed, "style": style.name})
        write_volume(label, os.path.join(out_dir, lab_rel), spacing=spec.spacing,
                     metadata={"case": cid, "seed": seed})
        if i >= n - n_test:
            split = "test"
        elif i >= n - n_test - n_val:
            split = "val"
        else:
            split = "train"
        cases.append({"id": cid, "volume": vol_rel, "label": lab_rel, "split": split})
    manifest = {
        "style": asdict(style),
        "master_seed": master_seed,
        "spec": asdict(spec),
        "cases": cases,
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_manifest(data_dir: str) -> dict:
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as f:
        return json.load(f)
