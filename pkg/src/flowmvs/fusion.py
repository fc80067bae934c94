"""Photometric and geometric filtering of per-view depth maps, and fusion into one cloud."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .coarse_depth import DepthMap
from .geometry import CameraView, pixel_grid, project, unproject

PIXEL_TOL = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    photometric_threshold_coarse: float = 0.5
    photometric_threshold_flow: float = 0.2
    geometric_max_discrepancy: float = 0.12
    min_consistent_views: int = 3
    merge_duplicates: bool = True
    merge_radius: float = 0.2

    def __post_init__(self) -> None:
        for name in ("photometric_threshold_coarse", "photometric_threshold_flow"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.geometric_max_discrepancy > 0:
            raise ValueError("geometric_max_discrepancy must be positive")
        if self.min_consistent_views < 1:
            raise ValueError("min_consistent_views must be >= 1")
        if self.merge_radius < 0:
            raise ValueError("merge_radius must be non-negative")

    @classmethod
    def from_config(cls, cfg) -> "FusionConfig":
        return cls(cfg.photometric_threshold_coarse, cfg.photometric_threshold_flow,
                   cfg.geometric_max_discrepancy, cfg.min_consistent_views,
                   cfg.merge_duplicates, cfg.merge_radius)


@dataclass
class FusedPointCloud:
    points: np.ndarray  # (P, 3) float64
    support: np.ndarray  # (P,) number of consistent views, reference included

    def __len__(self) -> int:
        return len(self.points)


def photometric_filter(depth: DepthMap, confidence, threshold: float) -> DepthMap:
    """Invalidate pixels whose confidence is below ``threshold``."""
    conf = torch.as_tensor(confidence)
    if tuple(conf.shape) != depth.shape:
        raise ValueError(f"confidence shape {tuple(conf.shape)} does not match depth {depth.shape}")
    keep = depth.valid_mask & (conf >= threshold)
    return DepthMap(depth.values, keep, depth.scale)


def _np(depth: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    return (depth.values.detach().to(torch.float64).numpy(), depth.valid_mask.numpy().astype(bool))


def sample_depth(values: np.ndarray, valid: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup at continuous ``pixels`` ``(N, 2)``.

    A lookup is valid only if the pixel lies inside the map and all four
    contributing taps are valid, so depth edges are never blended. Border
    lookups get ``PIXEL_TOL`` of slack for round-off in the reprojection.
    """
    h, w = values.shape
    u, v = pixels[:, 0], pixels[:, 1]
    e = PIXEL_TOL
    ok = (u >= -e) & (u <= w - 1 + e) & (v >= -e) & (v <= h - 1 + e)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    x0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    au, av = u - x0, v - y0
    taps = valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    top = values[y0, x0] + au * (values[y0, x1] - values[y0, x0])
    bot = values[y1, x0] + au * (values[y1, x1] - values[y1, x0])
    return top + av * (bot - top), ok & taps


@dataclass
class _Reprojection:
    consistent: np.ndarray  # (V, N) bool, reference row all True
    depths: np.ndarray  # (V, N) reprojected depths in the reference frame


def _reproject(r: int, maps, views: Sequence[CameraView], scales, max_disc: float) -> tuple[np.ndarray, _Reprojection]:
    values, valid = maps[r]
    h, w = values.shape
    pix = pixel_grid(h, w, torch.float64).numpy()[valid]
    d_ref = values[valid]
    n = len(d_ref)
    consistent = np.zeros((len(maps), n), dtype=bool)
    depths = np.zeros((len(maps), n))
    consistent[r] = True
    depths[r] = d_ref
    if n == 0:
        return pix, _Reprojection(consistent, depths)
    world = unproject(pix, np.maximum(d_ref, 1e-12), views[r], scale=scales[r]).numpy()
    for v in range(len(maps)):
        if v == r:
            continue
        pv, zv, front = (t.numpy() for t in project(world, views[v], scale=scales[v]))
        dv, ok = sample_depth(*maps[v], pv)
        ok &= front & (dv > 0)
        ok &= np.abs(dv - zv) <= max_disc
        consistent[v] = ok
        if ok.any():
            back = unproject(pv[ok], dv[ok], views[v], scale=scales[v])
            _, z_ref, _ = project(back, views[r], scale=scales[r])
            depths[v, ok] = z_ref.numpy()
    return pix, _Reprojection(consistent, depths)


def _scales(depths: Sequence[DepthMap]) -> list[float]:
    return [float(d.scale) for d in depths]


def geometric_filter(depths: Sequence[DepthMap], views: Sequence[CameraView], cfg: FusionConfig) -> list[np.ndarray]:
    """Per-view keep masks from cross-view reprojection agreement.

    For each valid pixel the point is projected into every other view; that
    view agrees when its (bilinearly sampled) depth differs from the point's
    depth there by at most ``cfg.geometric_max_discrepancy``. The count
    includes the reference view itself.
    """
    if len(depths) != len(views):
        raise ValueError("one depth map per view is required")
    if len(depths) < 2:
        raise ValueError("geometric filtering needs at least two views")
    maps = [_np(d) for d in depths]
    scales = _scales(depths)
    out = []
    for r in range(len(maps)):
        _, rep = _reproject(r, maps, views, scales, cfg.geometric_max_discrepancy)
        keep = np.zeros(maps[r][0].shape, dtype=bool)
        keep[maps[r][1]] = rep.consistent.sum(axis=0) >= cfg.min_consistent_views
        out.append(keep)
    return out


def fuse(depths: Sequence[DepthMap], views: Sequence[CameraView], masks: Sequence[np.ndarray] | None,
         cfg: FusionConfig) -> FusedPointCloud:
    """Average each surviving pixel's reprojected depths and lift it to the world.

    With ``cfg.merge_duplicates``, points from different reference views lying
    within ``cfg.merge_radius`` of each other are averaged into one.
    """
    if len(depths) != len(views):
        raise ValueError("one depth map per view is required")
    maps = [_np(d) for d in depths]
    scales = _scales(depths)
    pts, sup, src = [], [], []
    for r in range(len(maps)):
        values, valid = maps[r]
        keep = valid if masks is None else valid & np.asarray(masks[r], dtype=bool)
        trimmed = list(maps)
        trimmed[r] = (values, keep)
        pix, rep = _reproject(r, trimmed, views, scales, cfg.geometric_max_discrepancy)
        if len(pix) == 0:
            continue
        cnt = rep.consistent.sum(axis=0)
        mean = (rep.depths * rep.consistent).sum(axis=0) / cnt
        pts.append(unproject(pix, mean, views[r], scale=scales[r]).numpy())
        sup.append(cnt)
        src.append(np.full(len(cnt), r))
    if not pts:
        return FusedPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    points, support, source = np.concatenate(pts), np.concatenate(sup), np.concatenate(src)
    if cfg.merge_duplicates and cfg.merge_radius > 0:
        points, support = merge_duplicates(points, support, source, cfg.merge_radius)
    return FusedPointCloud(points, support.astype(np.int64))


def merge_duplicates(points: np.ndarray, support: np.ndarray, source: np.ndarray,
                     radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy single-pass merge: each point absorbs unclaimed neighbours from other sources.

    Points are visited in index order; a merged group is replaced by its mean
    and keeps the largest support among its members.
    """
    tree = cKDTree(points)
    claimed = np.zeros(len(points), dtype=bool)
    out_p, out_s = [], []
    for i in range(len(points)):
        if claimed[i]:
            continue
        claimed[i] = True
        group = [i]
        taken = {source[i]}
        for j in sorted(tree.query_ball_point(points[i], radius)):
            if not claimed[j] and source[j] not in taken:
                claimed[j] = True
                group.append(j)
                taken.add(source[j])
        out_p.append(points[group].mean(axis=0))
        out_s.append(support[group].max())
    return np.asarray(out_p).reshape(-1, 3), np.asarray(out_s)
