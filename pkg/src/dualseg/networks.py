"""3D U-Net backbone, task heads, discriminator, and checkpoint I/O.

Channels double per encoder level; every convolution is followed by group
normalization and a nonlinearity. The GFS net is a single-decoder U-Net
with a sigmoid segmentation head plus a 1x1x1 projection head; the LIS net
shares one encoder between a segmentation decoder and a restoration
decoder so the restoration task shapes the shared representation.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError


@dataclass(frozen=True)
class BackboneSpec:
    """U-Net geometry: ``levels`` resolutions, ``base_channels`` doubling per level."""

    levels: int = 4
    base_channels: int = 16
    groups: int = 8
    in_channels: int = 1
    projection_channels: int = 32

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.base_channels % self.groups != 0:
            raise ConfigError(
                f"group norm needs groups | channels: {self.groups} !| {self.base_channels}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Small strided conv classifier emitting one probability strictly in (0,1)."""

    in_channels: int = 1
    base_channels: int = 8
    layers: int = 3
    eps: float = 1e-7

    def __post_init__(self) -> None:
        if self.layers < 1 or self.base_channels < 1:
            raise ConfigError("discriminator needs at least one layer and channel")


def _block(in_ch: int, out_ch: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        chs = spec.channels
        ins = [spec.in_channels] + chs[:-1]
        self.blocks = nn.ModuleList(_block(i, o, spec.groups) for i, o in zip(ins, chs))
        self.pool = nn.MaxPool3d(2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        chs = spec.channels
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(chs[i + 1], chs[i], 2, stride=2)
            for i in reversed(range(spec.levels - 1)))
        self.blocks = nn.ModuleList(
            _block(2 * chs[i], chs[i], spec.groups)
            for i in reversed(range(spec.levels - 1)))

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        return x


def _check_input(x: torch.Tensor, spec: BackboneSpec) -> None:
    if x.dim() != 5 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected (B,{spec.in_channels},D,H,W), got {tuple(x.shape)}")
    d = spec.divisor
    if any(s % d != 0 for s in x.shape[2:]):
        raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must divide by {d}")


class GfsNet(nn.Module):
    """Contrastively regularized segmenter: seg head plus projection head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)
        self.seg_head = nn.Conv3d(spec.base_channels, 1, 1)
        self.proj_head = nn.Conv3d(spec.base_channels, spec.projection_channels, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_input(x, self.spec)
        f_out = self.decoder(self.encoder(x))
        prob = torch.sigmoid(self.seg_head(f_out))
        return prob, f_out

    def project(self, f_out: torch.Tensor) -> torch.Tensor:
        if f_out.dim() != 5 or f_out.shape[1] != self.spec.base_channels:
            raise ShapeError(
                f"projection expects {self.spec.base_channels} channels, got {tuple(f_out.shape)}")
        return self.proj_head(f_out)


class LisNet(nn.Module):
    """Shared encoder with a segmentation decoder and a restoration decoder."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        if spec.in_channels != 3:
            raise ConfigError(f"restoration net takes (image, prob, uncertainty): "
                              f"in_channels must be 3, got {spec.in_channels}")
        self.spec = spec
        self.encoder = Encoder(spec)
        self.dec_seg = Decoder(spec)
        self.dec_lis = Decoder(spec)
        self.seg_head = nn.Conv3d(spec.base_channels, 1, 1)
        self.rec_head = nn.Conv3d(spec.base_channels, 1, 1)

    def _stack(self, image: torch.Tensor, prob: torch.Tensor,
               unc: torch.Tensor) -> torch.Tensor:
        if not (image.shape == prob.shape == unc.shape):
            raise ShapeError("image, prob, and uncertainty shapes must match")
        return torch.cat([image, prob, unc], dim=1)

    def forward(self, image: torch.Tensor, prob: torch.Tensor,
                unc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._stack(image, prob, unc)
        _check_input(x, self.spec)
        feats = self.encoder(x)
        seg = torch.sigmoid(self.seg_head(self.dec_seg(feats)))
        restored = torch.sigmoid(self.rec_head(self.dec_lis(feats)))
        return seg, restored

    def forward_seg(self, image: torch.Tensor, prob: torch.Tensor,
                    unc: torch.Tensor) -> torch.Tensor:
        """Test path: the restoration decoder is never evaluated."""
        x = self._stack(image, prob, unc)
        _check_input(x, self.spec)
        feats = self.encoder(x)
        return torch.sigmoid(self.seg_head(self.dec_seg(feats)))


class Discriminator(nn.Module):
    """Real-vs-restored classifier; output clamped strictly inside (0,1)."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        ch_in = spec.in_channels
        ch = spec.base_channels
        for _ in range(spec.layers):
            layers += [nn.Conv3d(ch_in, ch, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch_in, ch = ch, ch * 2
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.classify = nn.Conv3d(ch_in, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (B,{self.spec.in_channels},D,H,W), got {tuple(x.shape)}")
        out = torch.sigmoid(self.classify(self.pool(self.features(x))))
        out = out.reshape(x.shape[0])
        return out.clamp(self.spec.eps, 1.0 - self.spec.eps)


def build_gfs(spec: BackboneSpec) -> GfsNet:
    return GfsNet(spec)


def build_lis(spec: BackboneSpec) -> LisNet:
    return LisNet(spec)


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec()) -> Discriminator:
    return Discriminator(spec)


_BUILDERS = {
    "gfs": (GfsNet, BackboneSpec),
    "lis": (LisNet, BackboneSpec),
    "disc": (Discriminator, DiscriminatorSpec),
}


def rng_snapshot(np_rng: np.random.Generator | None = None) -> dict:
    state = {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()}
    if np_rng is not None:
        state["numpy"] = json.loads(json.dumps(np_rng.bit_generator.state, default=int))
    return state


def restore_rng(state: dict) -> np.random.Generator | None:
    if "torch" in state:
        raw = base64.b64decode(state["torch"])
        torch.set_rng_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8))
    if "numpy" in state:
        rng = np.random.default_rng()
        rng.bit_generator.state = state["numpy"]
        return rng
    return None


def save_checkpoint(ckpt_dir: str, nets: dict[str, nn.Module], epoch: int,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write a checkpoint directory: JSON manifest plus one raw LE f32 blob per tensor."""
    os.makedirs(ckpt_dir, exist_ok=True)
    tensors = {}
    for net_name, net in nets.items():
        kind = _kind_of(net)
        for key, tensor in net.state_dict().items():
            path = f"{net_name}.{key}"
            fname = path + ".bin"
            arr = tensor.detach().cpu().numpy().astype("<f4")
            tmp = os.path.join(ckpt_dir, fname + ".tmp")
            with open(tmp, "wb") as f:
                f.write(arr.tobytes())
            os.replace(tmp, os.path.join(ckpt_dir, fname))
            tensors[path] = {"file": fname, "shape": list(tensor.shape)}
    manifest = {
        "format": 1,
        "epoch": epoch,
        "nets": {name: {"kind": _kind_of(net), "spec": asdict(net.spec)}
                 for name, net in nets.items()},
        "tensors": tensors,
        "rng": rng_state or {},
        "extra": extra or {},
    }
    tmp = os.path.join(ckpt_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(ckpt_dir, "manifest.json"))


def _kind_of(net: nn.Module) -> str:
    for kind, (cls, _) in _BUILDERS.items():
        if type(net) is cls:
            return kind
    raise CheckpointError(f"unknown net type {type(net).__name__}")


def load_checkpoint(ckpt_dir: str) -> tuple[dict[str, nn.Module], dict]:
    """Rebuild nets from a checkpoint directory; returns (nets, manifest)."""
    mpath = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise CheckpointError(f"no manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    nets: dict[str, nn.Module] = {}
    for name, info in manifest["nets"].items():
        cls, spec_cls = _BUILDERS[info["kind"]]
        spec_dict = dict(info["spec"])
        nets[name] = cls(spec_cls(**spec_dict))
    wanted = {f"{name}.{key}" for name, net in nets.items() for key in net.state_dict()}
    extra_keys = set(manifest["tensors"]) - wanted
    if extra_keys:
        raise CheckpointError(f"unexpected tensors in manifest: {sorted(extra_keys)[:3]}")
    for name, net in nets.items():
        state = {}
        for key, tensor in net.state_dict().items():
            path = f"{name}.{key}"
            if path not in manifest["tensors"]:
                raise CheckpointError(f"missing tensor {path}")
            entry = manifest["tensors"][path]
            fpath = os.path.join(ckpt_dir, entry["file"])
            arr = np.fromfile(fpath, dtype="<f4").reshape(entry["shape"])
            if list(tensor.shape) != entry["shape"]:
                raise CheckpointError(f"shape mismatch for {path}")
            state[key] = torch.from_numpy(arr.astype(np.float32))
        net.load_state_dict(state)
    return nets, manifest


def parameter_digest(net: nn.Module) -> str:
    """Order-stable digest of all parameters, for stage-isolation checks."""
    import hashlib

    h = hashlib.sha256()
    for key, tensor in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
