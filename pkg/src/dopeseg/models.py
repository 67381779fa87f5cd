"""Six encoder-decoder segmentation architectures behind one constructor.

All models map B×1×H×W inputs to per-pixel bladder probabilities of the same
spatial size (1×1 conv + sigmoid head). Downsampling is max-pooling and
upsampling is nearest-neighbor + conv for every architecture, so comparisons
differ only in the blocks each family is known for.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .hashing import stable_hash

UNET = "unet"
UNETPP = "unetpp"
HALF_UNET = "half_unet"
DC_UNET = "dc_unet"
ATTENTION_UNET = "attention_unet"
RRDB_UNET = "rrdb_unet"
ARCHITECTURES = (UNET, UNETPP, HALF_UNET, DC_UNET, ATTENTION_UNET, RRDB_UNET)

_RESIDUAL_SCALE = 0.2  # RRDB residual scaling


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = UNET
    depth: int = 4
    base_width: int = 32
    init: str = "he_normal"
    output_activation: str = "sigmoid"

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 8:
            raise ValueError("base_width must be >= 8")
        if self.init != "he_normal":
            raise ValueError(f"unsupported init {self.init!r}")
        if self.output_activation != "sigmoid":
            raise ValueError(f"unsupported output_activation {self.output_activation!r}")

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "depth": self.depth,
            "base_width": self.base_width,
            "init": self.init,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        spec = cls(**d)
        spec.validate()
        return spec


class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(ch_in, ch_out, 3, padding=1),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch_out, ch_out, 3, padding=1),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UpConv(nn.Module):
    """Nearest-neighbor 2x upsample followed by conv + BN + ReLU."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch_in, ch_out, 3, padding=1),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class AttentionGate(nn.Module):
    """Additive attention gate; keeps its last spatial map for inspection."""

    def __init__(self, ch_gate, ch_skip, ch_mid):
        super().__init__()
        self.w_gate = nn.Sequential(nn.Conv2d(ch_gate, ch_mid, 1), nn.BatchNorm2d(ch_mid))
        self.w_skip = nn.Sequential(nn.Conv2d(ch_skip, ch_mid, 1), nn.BatchNorm2d(ch_mid))
        self.psi = nn.Sequential(nn.Conv2d(ch_mid, 1, 1), nn.BatchNorm2d(1), nn.Sigmoid())
        self.relu = nn.ReLU(inplace=True)
        self.last_map = None

    def forward(self, gate, skip):
        att = self.psi(self.relu(self.w_gate(gate) + self.w_skip(skip)))
        self.last_map = att.detach()
        return skip * att


class DualChannelBlock(nn.Module):
    """Two parallel 3x3 paths with different receptive fields plus a residual 1x1 context shortcut."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        half = ch_out // 2
        self.path_short = nn.Sequential(
            nn.Conv2d(ch_in, half, 3, padding=1), nn.BatchNorm2d(half), nn.ReLU(inplace=True)
        )
        self.path_long = nn.Sequential(
            nn.Conv2d(ch_in, half, 3, padding=1),
            nn.BatchNorm2d(half),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, ch_out - half, 3, padding=1),
            nn.BatchNorm2d(ch_out - half),
            nn.ReLU(inplace=True),
        )
        self.shortcut = nn.Sequential(nn.Conv2d(ch_in, ch_out, 1), nn.BatchNorm2d(ch_out))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        merged = torch.cat([self.path_short(x), self.path_long(x)], dim=1)
        return self.relu(merged + self.shortcut(x))


class ResidualDenseBlock(nn.Module):
    """Four densely connected convs, the last fusing back to ``nf`` channels."""

    def __init__(self, nf, gc):
        super().__init__()
        self.conv1 = nn.Conv2d(nf, gc, 3, padding=1)
        self.conv2 = nn.Conv2d(nf + gc, gc, 3, padding=1)
        self.conv3 = nn.Conv2d(nf + 2 * gc, gc, 3, padding=1)
        self.conv4 = nn.Conv2d(nf + 3 * gc, nf, 3, padding=1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        x1 = self.lrelu(self.conv1(x))
        x2 = self.lrelu(self.conv2(torch.cat((x, x1), 1)))
        x3 = self.lrelu(self.conv3(torch.cat((x, x1, x2), 1)))
        x4 = self.conv4(torch.cat((x, x1, x2, x3), 1))
        return x + x4 * _RESIDUAL_SCALE


class RRDB(nn.Module):
    """Three residual dense blocks with an outer scaled residual."""

    def __init__(self, nf):
        super().__init__()
        gc = max(8, nf // 4)
        self.rdb1 = ResidualDenseBlock(nf, gc)
        self.rdb2 = ResidualDenseBlock(nf, gc)
        self.rdb3 = ResidualDenseBlock(nf, gc)

    def forward(self, x):
        return x + self.rdb3(self.rdb2(self.rdb1(x))) * _RESIDUAL_SCALE


class SegmentationModel(nn.Module):
    """Base class: spec bookkeeping, input validation, probability head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.seed = None

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W input, got shape {tuple(x.shape)}")
        factor = 2**self.spec.depth
        h, w = x.shape[2], x.shape[3]
        if h % factor or w % factor:
            raise ValueError(
                f"input size {h}x{w} not divisible by 2^depth = {factor} for depth {self.spec.depth}"
            )


def _encoder_widths(spec: ModelSpec) -> list[int]:
    return [spec.base_width * 2**i for i in range(spec.depth + 1)]


class UNet(SegmentationModel):
    def __init__(self, spec, block=ConvBlock):
        super().__init__(spec)
        widths = _encoder_widths(spec)
        self.pool = nn.MaxPool2d(2)
        self.encoders = nn.ModuleList(
            [block(1 if i == 0 else widths[i - 1], widths[i]) for i in range(spec.depth)]
        )
        self.bottleneck = block(widths[spec.depth - 1], widths[spec.depth])
        self.ups = nn.ModuleList(
            [UpConv(widths[i + 1], widths[i]) for i in reversed(range(spec.depth))]
        )
        self.decoders = nn.ModuleList(
            [block(2 * widths[i], widths[i]) for i in reversed(range(spec.depth))]
        )
        self.head = nn.Conv2d(spec.base_width, 1, 1)

    def forward(self, x):
        self.check_input(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        return torch.sigmoid(self.head(x))


class DCUNet(UNet):
    def __init__(self, spec):
        super().__init__(spec, block=DualChannelBlock)


class AttentionUNet(UNet):
    def __init__(self, spec):
        super().__init__(spec)
        widths = _encoder_widths(spec)
        self.gates = nn.ModuleList(
            [AttentionGate(widths[i], widths[i], max(widths[i] // 2, 1)) for i in reversed(range(spec.depth))]
        )

    def forward(self, x):
        self.check_input(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, gate, skip in zip(self.ups, self.decoders, self.gates, reversed(skips)):
            g = up(x)
            x = dec(torch.cat([gate(g, skip), g], dim=1))
        return torch.sigmoid(self.head(x))

    def attention_maps(self) -> list[torch.Tensor]:
        """Spatial attention maps captured during the most recent forward."""
        return [g.last_map for g in self.gates if g.last_map is not None]


class NestedUNet(SegmentationModel):
    """Dense nested skip pathways: node (i, j) fuses all (i, k<j) with up(i+1, j-1)."""

    def __init__(self, spec):
        super().__init__(spec)
        widths = _encoder_widths(spec)
        self.pool = nn.MaxPool2d(2)
        self.blocks = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for i in range(spec.depth + 1):
            self.blocks[f"x{i}_0"] = ConvBlock(1 if i == 0 else widths[i - 1], widths[i])
        for j in range(1, spec.depth + 1):
            for i in range(spec.depth + 1 - j):
                self.ups[f"u{i}_{j}"] = UpConv(widths[i + 1], widths[i])
                self.blocks[f"x{i}_{j}"] = ConvBlock((j + 1) * widths[i], widths[i])
        self.head = nn.Conv2d(spec.base_width, 1, 1)

    def forward(self, x):
        self.check_input(x)
        nodes = {}
        for i in range(self.spec.depth + 1):
            nodes[(i, 0)] = self.blocks[f"x{i}_0"](x if i == 0 else self.pool(nodes[(i - 1, 0)]))
        for j in range(1, self.spec.depth + 1):
            for i in range(self.spec.depth + 1 - j):
                up = self.ups[f"u{i}_{j}"](nodes[(i + 1, j - 1)])
                cat = torch.cat([nodes[(i, k)] for k in range(j)] + [up], dim=1)
                nodes[(i, j)] = self.blocks[f"x{i}_{j}"](cat)
        return torch.sigmoid(self.head(nodes[(0, self.spec.depth)]))


class HalfUNet(SegmentationModel):
    """Constant-width encoder with full-scale additive feature fusion instead of a decoder."""

    def __init__(self, spec):
        super().__init__(spec)
        w = spec.base_width
        self.pool = nn.MaxPool2d(2)
        self.encoders = nn.ModuleList(
            [ConvBlock(1 if i == 0 else w, w) for i in range(spec.depth + 1)]
        )
        self.fuse = ConvBlock(w, w)
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, x):
        self.check_input(x)
        features = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            features.append(x)
        full = features[0]
        for i, feat in enumerate(features[1:], start=1):
            full = full + F.interpolate(feat, scale_factor=2**i, mode="nearest")
        return torch.sigmoid(self.head(self.fuse(full)))


class RRDBUNet(SegmentationModel):
    """U-Net whose encoder blocks are residual-in-residual dense blocks (no BN there)."""

    def __init__(self, spec):
        super().__init__(spec)
        widths = _encoder_widths(spec)
        self.pool = nn.MaxPool2d(2)
        self.entries = nn.ModuleList(
            [nn.Conv2d(1 if i == 0 else widths[i - 1], widths[i], 3, padding=1) for i in range(spec.depth + 1)]
        )
        self.rrdbs = nn.ModuleList([RRDB(widths[i]) for i in range(spec.depth + 1)])
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)
        self.ups = nn.ModuleList(
            [UpConv(widths[i + 1], widths[i]) for i in reversed(range(spec.depth))]
        )
        self.decoders = nn.ModuleList(
            [ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(spec.depth))]
        )
        self.head = nn.Conv2d(spec.base_width, 1, 1)

    def forward(self, x):
        self.check_input(x)
        skips = []
        for i in range(self.spec.depth + 1):
            if i > 0:
                x = self.pool(x)
            x = self.rrdbs[i](self.lrelu(self.entries[i](x)))
            if i < self.spec.depth:
                skips.append(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        return torch.sigmoid(self.head(x))


_BUILDERS = {
    UNET: UNet,
    UNETPP: NestedUNet,
    HALF_UNET: HalfUNet,
    DC_UNET: DCUNet,
    ATTENTION_UNET: AttentionUNet,
    RRDB_UNET: RRDBUNet,
}


def init_he_normal(model: nn.Module, seed: int) -> None:
    """He-normal conv weights (std = sqrt(2 / fan_in)) from a dedicated generator."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_model(spec: ModelSpec, seed: int) -> SegmentationModel:
    """Construct and He-initialize the requested architecture."""
    spec.validate()
    model = _BUILDERS[spec.architecture](spec)
    init_he_normal(model, seed)
    model.seed = int(seed)
    return model


def predict(model: SegmentationModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Probability maps for a stack of slices, deterministic (eval mode).

    Accepts B×H×W or B×H×W×1 arrays and returns probabilities of the same
    shape as float32.
    """
    arr = np.asarray(images, dtype=np.float32)
    squeeze_channel = False
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
        squeeze_channel = True
    if arr.ndim != 3:
        raise ValueError(f"expected B x H x W (x1) images, got shape {np.asarray(images).shape}")
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, arr.shape[0], batch_size):
            chunk = torch.from_numpy(arr[start : start + batch_size]).unsqueeze(1)
            outs.append(model(chunk).squeeze(1).numpy())
    result = np.concatenate(outs, axis=0).astype(np.float32)
    return result[..., None] if squeeze_channel else result


def binarize(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities into a {0,1} mask; ties go to foreground."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in the open interval (0, 1), got {threshold}")
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def state_hash(model: nn.Module) -> str:
    """Hash of all parameter and buffer bytes, for determinism checks."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    model: SegmentationModel, stem: str | Path, train_config_hash: str = ""
) -> Path:
    """Write ``<stem>.pt`` (named parameters) plus ``<stem>.json`` header."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), stem.with_suffix(".pt"))
    header = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "parameter_count": model.parameter_count,
        "train_config_hash": train_config_hash,
        "state_hash": state_hash(model),
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    return stem.with_suffix(".pt")


def load_checkpoint(stem: str | Path) -> SegmentationModel:
    """Rebuild a model from a checkpoint pair written by :func:`save_checkpoint`."""
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    model = build_model(ModelSpec.from_dict(header["spec"]), header["seed"] or 0)
    model.load_state_dict(torch.load(stem.with_suffix(".pt"), weights_only=True))
    return model
