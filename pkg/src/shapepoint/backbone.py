"""3D U-Net segmentation backbone producing the multi-scale feature pyramid.

Downsampling is stride-2 max-pooling, upsampling nearest-neighbor, skips by
channel concatenation.  Normalization is instance-style (per-sample
statistics) so batch size 1 is well-defined and inference is deterministic.
X_C is the bottleneck feature (spatial dims input/8), X_F the full-resolution
decoder feature feeding both the sigmoid segmentation head and the
point-network.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError
from .nnutil import clamped_bce, xavier_init
from .synthvol import MaskVolume, VoxelVolume


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    growth: int = 2

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.growth < 1:
            raise ShapeError("UNetConfig fields must be positive")

    @property
    def scale_factor(self) -> int:
        return 2**self.depth

    def channels_at(self, level: int) -> int:
        return self.base_channels * self.growth**level


@dataclass
class FeaturePyramid:
    """Coarse bottleneck feature X_C and fine full-resolution feature X_F."""

    x_c: torch.Tensor  # (C_C, D/8, H/8, W/8)
    x_f: torch.Tensor  # (C_F, D, H, W)

    def __post_init__(self):
        if self.x_c.ndim != 4 or self.x_f.ndim != 4:
            raise ShapeError("pyramid features must be (C, D, H, W)")
        for i, (c, f) in enumerate(zip(self.x_c.shape[1:], self.x_f.shape[1:])):
            if f != 8 * c:
                raise ShapeError(f"X_F axis {i} is {f}, expected 8x X_C's {c}")


def check_dims_divisible(dims, factor: int) -> None:
    for name, d in zip("DHW", dims):
        if d % factor != 0:
            raise ShapeError(f"axis {name} has size {d}, not divisible by {factor}")


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ReLU(),
        nn.Conv3d(c_out, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ReLU(),
    )


class UNet3D(nn.Module):
    """Encoder-decoder with `depth` pooling stages; forward yields pyramid + seg."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch = [config.channels_at(i) for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for c in ch[:-1]:
            self.encoders.append(_conv_block(c_prev, c))
            c_prev = c
        self.bottleneck = _conv_block(ch[-2], ch[-1])
        self.pool = nn.MaxPool3d(2)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.decoders = nn.ModuleList()
        c_prev = ch[-1]
        for c in reversed(ch[:-1]):
            self.decoders.append(_conv_block(c_prev + c, c))
            c_prev = c
        self.head = nn.Conv3d(ch[0], 1, 1)
        xavier_init(self)

    @property
    def fine_channels(self) -> int:
        return self.config.base_channels

    @property
    def coarse_channels(self) -> int:
        return self.config.channels_at(self.config.depth)

    def forward(self, volume: torch.Tensor) -> tuple[FeaturePyramid, torch.Tensor]:
        """volume: (D, H, W) or (C_in, D, H, W) -> (pyramid, seg probabilities (D, H, W))."""
        if volume.ndim == 3:
            volume = volume.unsqueeze(0)
        if volume.ndim != 4 or volume.shape[0] != self.config.in_channels:
            raise ShapeError(
                f"expected ({self.config.in_channels}, D, H, W) input, got {tuple(volume.shape)}"
            )
        check_dims_divisible(volume.shape[1:], self.config.scale_factor)

        x = volume.unsqueeze(0)  # add batch dim
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        x_c = x
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(torch.cat([self.upsample(x), skip], dim=1))
        x_f = x
        seg = torch.sigmoid(self.head(x_f))
        return FeaturePyramid(x_c=x_c[0], x_f=x_f[0]), seg[0, 0]


def unet_forward(model: UNet3D, volume) -> tuple[FeaturePyramid, torch.Tensor]:
    """Run the backbone on a VoxelVolume or raw (D, H, W) tensor."""
    if isinstance(volume, VoxelVolume):
        volume = torch.as_tensor(volume.data)
    dtype = next(model.parameters()).dtype
    return model(torch.as_tensor(volume).to(dtype))


def seg_loss(seg: torch.Tensor, mask, kind: str = "bce") -> torch.Tensor:
    """Segmentation loss: clamped BCE by default, soft Dice behind a flag."""
    if isinstance(mask, MaskVolume):
        mask = mask.data
    target = torch.as_tensor(mask).to(seg.dtype)
    if seg.shape != target.shape:
        raise ShapeError(f"seg dims {tuple(seg.shape)} != mask dims {tuple(target.shape)}")
    if kind == "bce":
        return clamped_bce(seg, target)
    if kind == "soft_dice":
        inter = (seg * target).sum()
        return 1.0 - (2.0 * inter + 1.0) / (seg.sum() + target.sum() + 1.0)
    raise ShapeError(f"unknown seg loss kind {kind!r}")
