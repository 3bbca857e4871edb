"""Organ point-network: initialization from X_C, two residual refinements
indexed from X_F, plus the Two-Branch baseline generator.

Points are (N, 3) tensors of (z, y, x) coordinates in [0, 1].  The feature
index layer has no parameters: it rounds scaled coordinates to the nearest
voxel (half away from zero, clamped in-bounds), gathers the 3x3x3
neighborhood with zero padding, and flattens channel-major to 27*C_F.
Gradients reach the gathered X_F values but never the coordinates through
the index; the residual skip-connection carries coordinate gradients
instead.  Refinement output layers start at zero, so each stage is exactly
the identity at initialization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeaturePyramid
from .errors import ConfigurationError, GeometryError, ShapeError
from .nnutil import mlp, xavier_init, zero_init

NEIGHBORHOOD_OFFSETS = torch.tensor(
    list(itertools.product((-1, 0, 1), repeat=3)), dtype=torch.long
)  # (27, 3) in lexicographic (dz, dy, dx) order


@dataclass(frozen=True)
class PointNetConfig:
    n_points: int = 512
    init_hidden: tuple[int, int] = (256, 256)
    refine_hidden: tuple[int, int] = (128, 64)
    gather: str = "nearest"  # or "trilinear"

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigurationError(f"n_points must be >= 1, got {self.n_points}")
        if self.gather not in ("nearest", "trilinear"):
            raise ConfigurationError(f"unknown gather mode {self.gather!r}")


def _check_points(points: torch.Tensor) -> torch.Tensor:
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {tuple(points.shape)}")
    if bool((points < 0).any()) or bool((points > 1).any()):
        raise GeometryError("point coordinates outside [0, 1]; clamp before indexing")
    return points


def feature_index(x_f: torch.Tensor, points: torch.Tensor, gather: str = "nearest") -> torch.Tensor:
    """Per-point flattened 3x3x3 neighborhood of X_F: (N, 27*C_F).

    `nearest` (default) rounds to the closest voxel with no coordinate
    gradient; `trilinear` interpolates each neighborhood cell at the
    continuous position, which does pass gradients to the coordinates.
    """
    if x_f.ndim != 4:
        raise ShapeError(f"X_F must be (C, D, H, W), got {tuple(x_f.shape)}")
    _check_points(points)
    dims = torch.tensor(x_f.shape[1:], dtype=x_f.dtype, device=x_f.device)
    if gather == "nearest":
        scaled = points.detach() * dims
        center = torch.floor(scaled + 0.5).long()
        center = torch.minimum(
            torch.clamp(center, min=0), (dims.long() - 1).unsqueeze(0)
        )
        padded = F.pad(x_f, (1, 1, 1, 1, 1, 1))
        grid = center.unsqueeze(1) + 1 + NEIGHBORHOOD_OFFSETS.to(center.device).unsqueeze(0)
        vals = padded[:, grid[..., 0], grid[..., 1], grid[..., 2]]  # (C, N, 27)
        return vals.permute(1, 0, 2).reshape(len(points), -1)
    if gather == "trilinear":
        # Same convention as `nearest`: integer values of p*dims sit exactly on
        # voxel centers, so the two modes agree wherever p*dims is integral.
        pad = 3
        padded = F.pad(x_f, (pad,) * 6)
        centers = points * dims
        q = centers.unsqueeze(1) + NEIGHBORHOOD_OFFSETS.to(x_f.device).to(x_f.dtype) + pad
        c0 = torch.floor(q)
        frac = q - c0
        c0 = c0.long()
        out = None
        for corner in itertools.product((0, 1), repeat=3):
            off = torch.tensor(corner, device=x_f.device)
            idx = c0 + off
            w = torch.ones_like(frac[..., 0])
            for ax in range(3):
                w = w * (frac[..., ax] if corner[ax] else 1.0 - frac[..., ax])
            vals = padded[:, idx[..., 0], idx[..., 1], idx[..., 2]]  # (C, N, 27)
            term = vals * w.unsqueeze(0)
            out = term if out is None else out + term
        return out.permute(1, 0, 2).reshape(len(points), -1)
    raise ConfigurationError(f"unknown gather mode {gather!r}")


class PointInitializer(nn.Module):
    """F_i: global-average-pooled X_C -> two hidden FC layers -> sigmoid points."""

    def __init__(self, coarse_channels: int, config: PointNetConfig):
        super().__init__()
        self.config = config
        h1, h2 = config.init_hidden
        self.net = mlp((coarse_channels, h1, h2, 3 * config.n_points), nn.Sigmoid())
        xavier_init(self)

    def forward(self, x_c: torch.Tensor) -> torch.Tensor:
        if x_c.ndim != 4:
            raise ShapeError(f"X_C must be (C, D, H, W), got {tuple(x_c.shape)}")
        pooled = x_c.mean(dim=(1, 2, 3))
        return self.net(pooled).view(self.config.n_points, 3)


class PointRefiner(nn.Module):
    """F_r: shared per-point residual map on indexed features, identity at init."""

    def __init__(self, fine_channels: int, config: PointNetConfig):
        super().__init__()
        self.config = config
        h1, h2 = config.refine_hidden
        self.net = mlp((27 * fine_channels, h1, h2, 3))
        xavier_init(self)
        zero_init(self.net[-1])

    def forward(self, points: torch.Tensor, x_f: torch.Tensor) -> torch.Tensor:
        feats = feature_index(x_f, points, self.config.gather)
        return torch.clamp(points + self.net(feats), 0.0, 1.0)


class PointNetwork(nn.Module):
    """Full generator: init from X_C, then two refinements against X_F."""

    def __init__(self, coarse_channels: int, fine_channels: int,
                 config: PointNetConfig = PointNetConfig()):
        super().__init__()
        self.config = config
        self.initializer = PointInitializer(coarse_channels, config)
        self.refine1 = PointRefiner(fine_channels, config)
        self.refine2 = PointRefiner(fine_channels, config)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        p = self.initializer(pyramid.x_c)
        p = self.refine1(p, pyramid.x_f)
        return self.refine2(p, pyramid.x_f)


class TwoBranch(nn.Module):
    """Baseline generator from global information only (X_C, no refinement).

    Branch 1 maps the pooled X_C vector through an FC path to N_P/2 points;
    branch 2 upsamples X_C with two stride-2 transposed convolutions to a
    3-channel grid read off as the first N_P/2 cells.  Branch outputs are
    concatenated and squashed by a sigmoid.
    """

    def __init__(self, coarse_channels: int, config: PointNetConfig = PointNetConfig()):
        super().__init__()
        if config.n_points % 2 != 0:
            raise ConfigurationError(
                f"two-branch needs an even n_points, got {config.n_points}"
            )
        self.config = config
        half = config.n_points // 2
        self.fc_branch = mlp((coarse_channels, config.init_hidden[0], 3 * half))
        mid = max(coarse_channels // 2, 3)
        self.deconv_branch = nn.Sequential(
            nn.ConvTranspose3d(coarse_channels, mid, 2, stride=2),
            nn.ReLU(),
            nn.ConvTranspose3d(mid, 3, 2, stride=2),
        )
        xavier_init(self)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x_c = pyramid.x_c
        half = self.config.n_points // 2
        fc_pts = self.fc_branch(x_c.mean(dim=(1, 2, 3))).view(half, 3)
        grid = self.deconv_branch(x_c.unsqueeze(0))[0]  # (3, 4D, 4H, 4W)
        cells = grid.reshape(3, -1).t()
        if len(cells) < half:
            raise ConfigurationError(
                f"deconv grid has {len(cells)} cells < n_points/2 = {half}; "
                "use a larger input volume or fewer points"
            )
        return torch.sigmoid(torch.cat([fc_pts, cells[:half]], dim=0))
