"""Image feature pyramid, differentiable feature fetching and multi-view variance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .geometry import CameraView, project

NUM_LEVELS = 3


@dataclass
class FeaturePyramid:
    """Feature maps of ``V`` images at 1/2, 1/4 and 1/8 resolution.

    ``levels[j - 1]`` has shape ``(V, C_j, H_j, W_j)`` for pyramid level ``j``.
    """

    levels: tuple[Tensor, Tensor, Tensor]

    def __post_init__(self) -> None:
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"a feature pyramid has exactly {NUM_LEVELS} levels")
        for a, b in zip(self.levels[:-1], self.levels[1:]):
            if a.shape[0] != b.shape[0]:
                raise ValueError("all levels must hold the same number of views")
            if b.shape[-2] != -(-a.shape[-2] // 2) or b.shape[-1] != -(-a.shape[-1] // 2):
                raise ValueError("each level must halve the spatial size (rounded up)")

    def level(self, j: int) -> Tensor:
        if j not in (1, 2, 3):
            raise ValueError(f"pyramid level must be 1, 2 or 3, got {j}")
        return self.levels[j - 1]

    @property
    def num_views(self) -> int:
        return self.levels[0].shape[0]

    @property
    def channel_widths(self) -> tuple[int, ...]:
        return tuple(lv.shape[1] for lv in self.levels)

    def select(self, indices: Sequence[int]) -> "FeaturePyramid":
        idx = list(indices)
        return FeaturePyramid(tuple(lv[idx] for lv in self.levels))


def relu_init(module: nn.Module) -> None:
    """He initialisation for every conv/linear layer, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True))


class FeatureNet(nn.Module):
    """Three stride-2 stages; the last layer of each stage is a pyramid level."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32)) -> None:
        super().__init__()
        if len(widths) != NUM_LEVELS or any(w <= 0 for w in widths):
            raise ValueError(f"expected {NUM_LEVELS} positive channel widths, got {widths}")
        self.widths = tuple(int(w) for w in widths)
        stages = []
        cin = 3
        for w in self.widths:
            stages.append(nn.Sequential(_conv(cin, w, stride=2), _conv(w, w), _conv(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)
        relu_init(self)

    def forward(self, images: Tensor) -> FeaturePyramid:
        """``images``: ``(V, 3, H, W)`` in ``[0, 1]``; each image is standardised first."""
        h, w = images.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(
                f"image size {w}x{h} must be divisible by 8; pad to "
                f"{-(-w // 8) * 8}x{-(-h // 8) * 8}"
            )
        mean = images.mean(dim=(1, 2, 3), keepdim=True)
        std = images.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
        x = (images - mean) / (std + 1e-6)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(tuple(levels))


def extract_pyramid(net: FeatureNet, image) -> FeaturePyramid:
    """Pyramid of a single ``H x W x 3`` image (array or tensor)."""
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, Tensor) else image)
    img = img.to(next(net.parameters()).dtype)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {tuple(img.shape)}")
    return net(img.permute(2, 0, 1).unsqueeze(0))


def fetch_feature(fmap: Tensor, pixels: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinearly sample ``fmap`` ``(C, H, W)`` at continuous ``pixels`` ``(..., 2)``.

    Coordinates outside the map are clamped to the edge; the second return
    value flags which queries were inside ``[0, W-1] x [0, H-1]``.
    """
    c, h, w = fmap.shape
    u, v = pixels[..., 0], pixels[..., 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = u.clamp(0, w - 1)
    v = v.clamp(0, h - 1)
    u0 = torch.floor(u).clamp(max=max(w - 2, 0))
    v0 = torch.floor(v).clamp(max=max(h - 2, 0))
    au = (u - u0).unsqueeze(-1)
    av = (v - v0).unsqueeze(-1)
    x0 = u0.long()
    y0 = v0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = fmap.permute(1, 2, 0).reshape(h * w, c)
    f00 = flat[y0 * w + x0]
    f01 = flat[y0 * w + x1]
    f10 = flat[y1 * w + x0]
    f11 = flat[y1 * w + x1]
    # Convex-combination form is exact on grid nodes (weights 0 and 1).
    top = (1 - au) * f00 + au * f01
    bottom = (1 - au) * f10 + au * f11
    return (1 - av) * top + av * bottom, inside


def variance_cost(features: Tensor, visible: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Per-channel population variance across the leading (view) axis.

    ``features``: ``(N, ..., C)``. ``visible``: optional ``(N, ...)`` mask of
    views to include. Returns ``(variance (..., C), count (...))``; entries with
    no visible view are zero.
    """
    if features.shape[0] == 0:
        raise ValueError("variance_cost needs at least one view")
    if visible is None:
        mean = features.mean(dim=0)
        var = ((features - mean) ** 2).mean(dim=0)
        count = torch.full(var.shape[:-1], features.shape[0], dtype=torch.long)
        return var, count
    wts = visible.to(features.dtype).unsqueeze(-1)
    count = visible.sum(dim=0)
    denom = count.clamp(min=1).to(features.dtype).unsqueeze(-1)
    mean = (features * wts).sum(dim=0) / denom
    var = (((features - mean) ** 2) * wts).sum(dim=0) / denom
    return var, count


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned box used to normalise world coordinates to ``[-1, 1]^3``."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if np.any(hi - lo <= 0) or not np.all(np.isfinite(hi - lo)):
            raise ValueError(f"degenerate scene bounds {self.lo} .. {self.hi}")
        object.__setattr__(self, "lo", tuple(float(x) for x in lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in hi))

    @classmethod
    def from_points(cls, points, margin: float = 0.0) -> "SceneBounds":
        p = points.detach().cpu().numpy() if isinstance(points, Tensor) else np.asarray(points)
        p = p.reshape(-1, 3)
        return cls(tuple(p.min(0) - margin), tuple(p.max(0) + margin))

    def normalize(self, points: Tensor) -> Tensor:
        lo = torch.as_tensor(self.lo, dtype=points.dtype)
        hi = torch.as_tensor(self.hi, dtype=points.dtype)
        return (2.0 * (points - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)


def augment_point(variance: Tensor, points: Tensor, bounds: SceneBounds) -> Tensor:
    """Concatenate fetched variance features ``(..., C)`` with normalised coordinates."""
    return torch.cat([variance, bounds.normalize(points)], dim=-1)


def project_to_views(points: Tensor, views: Sequence[CameraView]) -> tuple[Tensor, Tensor]:
    """Full-resolution pixels ``(V, ..., 2)`` and visibility ``(V, ...)`` of ``points`` in each view."""
    pix, vis = [], []
    for view in views:
        uv, _, valid = project(points, view, level=0)
        w, h = view.image_size
        inside = (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
        pix.append(uv)
        vis.append(valid & inside)
    return torch.stack(pix), torch.stack(vis)


def fetch_multiview_variance(points: Tensor, views: Sequence[CameraView], pyramid: FeaturePyramid,
                             level: int | Sequence[int] = 3,
                             projection: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Fetch features of ``points`` ``(..., 3)`` in every view and reduce them by variance.

    ``level`` may be a single pyramid level or several, in which case the
    per-level variances are concatenated along the channel axis. A view is
    used for a point when the point lies in front of it and inside its image.
    Returns ``(variance (..., C), visible_count (...))``.
    """
    if len(views) != pyramid.num_views:
        raise ValueError(f"{len(views)} views but the pyramid holds {pyramid.num_views}")
    levels = [level] if isinstance(level, int) else list(level)
    pix, vis = projection if projection is not None else project_to_views(points, views)
    out = []
    count = None
    for j in levels:
        fmaps = pyramid.level(j)
        scale = 0.5**j
        feats = torch.stack([fetch_feature(fmaps[i], pix[i] * scale)[0] for i in range(len(views))])
        var, count = variance_cost(feats, vis)
        out.append(var)
    return torch.cat(out, dim=-1), count
