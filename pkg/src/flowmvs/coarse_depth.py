"""Low-resolution plane-sweep cost volume, 3D regularisation and soft-argmin regression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .feature import FeaturePyramid, fetch_multiview_variance, relu_init
from .geometry import CameraView, pixel_grid, unproject

COST_LEVEL = 3
NORMALIZATION_TOL = 1e-3


@dataclass(frozen=True)
class DepthPlaneSet:
    depths: Tensor
    d_min: float
    d_max: float

    @property
    def spacing(self) -> float:
        return (self.d_max - self.d_min) / (len(self.depths) - 1)

    def __len__(self) -> int:
        return len(self.depths)


def make_planes(d_min: float, d_max: float, count: int, dtype: torch.dtype = torch.float32) -> DepthPlaneSet:
    """``count`` fronto-parallel planes uniformly spaced over ``[d_min, d_max]``."""
    if not (d_max > d_min > 0) or count < 2:
        raise ValueError(f"invalid plane configuration d_min={d_min}, d_max={d_max}, count={count}")
    idx = torch.arange(count, dtype=torch.float64)
    depths = d_min + idx * ((d_max - d_min) / (count - 1))
    depths[-1] = d_max
    return DepthPlaneSet(depths.to(dtype), float(d_min), float(d_max))


@dataclass
class DepthMap:
    """Depth in mm with a validity mask; invalid entries hold 0.

    ``scale`` is the resolution relative to the full image (1/8 for coarse maps).
    """

    values: Tensor
    valid_mask: Tensor
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.values.shape != self.valid_mask.shape or self.values.ndim != 2:
            raise ValueError("depth values and mask must be matching 2D arrays")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    def masked(self) -> Tensor:
        return torch.where(self.valid_mask, self.values, torch.zeros_like(self.values))

    def detach(self) -> "DepthMap":
        return DepthMap(self.values.detach(), self.valid_mask, self.scale)


def build_cost_volume(ref_view: CameraView, views: Sequence[CameraView], pyramid: FeaturePyramid,
                      planes: DepthPlaneSet) -> tuple[Tensor, Tensor]:
    """Variance cost volume on the reference frustum at 1/8 resolution.

    ``views[0]`` / ``pyramid`` view 0 must be the reference. Returns the
    volume ``(C, D, H, W)`` and the per-voxel visible-view count ``(D, H, W)``.
    """
    if len(views) < 2:
        raise ValueError("a cost volume needs at least one source view")
    fmap = pyramid.level(COST_LEVEL)
    dtype = fmap.dtype
    h, w = fmap.shape[-2:]
    grid = pixel_grid(h, w, dtype)
    depths = planes.depths.to(dtype)
    pix = grid.unsqueeze(0).expand(len(depths), h, w, 2)
    dd = depths.view(-1, 1, 1).expand(len(depths), h, w)
    points = unproject(pix, dd, ref_view, level=COST_LEVEL)
    var, count = fetch_multiview_variance(points, views, pyramid, COST_LEVEL)
    return var.permute(3, 0, 1, 2), count


def _conv3d(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True))


class CostRegularizer(nn.Module):
    """Three-scale 3D encoder-decoder producing one logit per voxel."""

    def __init__(self, in_channels: int, widths: Sequence[int] = (8, 16, 32)) -> None:
        super().__init__()
        w0, w1, w2 = widths
        self.enc0 = _conv3d(in_channels, w0)
        self.enc1 = nn.Sequential(_conv3d(w0, w1, stride=2), _conv3d(w1, w1))
        self.enc2 = nn.Sequential(_conv3d(w1, w2, stride=2), _conv3d(w2, w2))
        self.up2 = nn.ConvTranspose3d(w2, w1, 3, stride=2, padding=1)
        self.up1 = nn.ConvTranspose3d(w1, w0, 3, stride=2, padding=1)
        self.head = nn.Conv3d(w0, 1, 3, padding=1)
        relu_init(self)

    def forward(self, volume: Tensor) -> Tensor:
        """``volume``: ``(C, D, H, W)`` -> logits ``(D, H, W)``."""
        x0 = self.enc0(volume.unsqueeze(0))
        x1 = self.enc1(x0)
        x2 = self.enc2(x1)
        y1 = F.relu(self.up2(x2, output_size=x1.shape[-3:]) + x1)
        y0 = F.relu(self.up1(y1, output_size=x0.shape[-3:]) + x0)
        return self.head(y0)[0, 0]


def regularize(net: CostRegularizer, volume: Tensor) -> Tensor:
    """Probability volume ``(D, H, W)``; softmax along depth."""
    return torch.softmax(net(volume), dim=0)


def _check_normalized(prob: Tensor, dim: int) -> None:
    err = (prob.detach().sum(dim=dim) - 1.0).abs().max()
    if err > NORMALIZATION_TOL:
        raise ValueError(f"probabilities are not normalised (max deviation {float(err):.3g})")


def soft_argmin(prob: Tensor, planes: DepthPlaneSet, scale: float = 1.0 / 8) -> DepthMap:
    """Expected depth under ``prob`` ``(D, H, W)``; every pixel is valid."""
    _check_normalized(prob, 0)
    depths = planes.depths.to(prob.dtype).view(-1, 1, 1)
    values = (prob * depths).sum(dim=0)
    return DepthMap(values, torch.ones_like(values, dtype=torch.bool), scale)


def photometric_confidence(prob: Tensor) -> Tensor:
    """Probability of the most likely depth layer per pixel."""
    _check_normalized(prob, 0)
    return prob.max(dim=0).values


def voxel_ratio(coarse_scale: float = 1 / 8, coarse_planes: int = 48,
                ref_scale: float = 1 / 4, ref_planes: int = 256) -> float:
    """Cost-volume voxel count relative to a reference configuration."""
    return (coarse_scale**2 * coarse_planes) / (ref_scale**2 * ref_planes)
