"""The full network: shared feature pyramid, coarse cost-volume branch and point-flow refiner."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .coarse_depth import (
    CostRegularizer,
    DepthMap,
    DepthPlaneSet,
    build_cost_volume,
    photometric_confidence,
    regularize,
    soft_argmin,
)
from .config import Config
from .feature import FeatureNet, FeaturePyramid, SceneBounds
from .geometry import CameraView
from .pointflow import FlowNet, RefinementSchedule, refine_iteratively


@dataclass
class Prediction:
    depths: list[DepthMap]
    confidences: list[Tensor]
    prob_volume: Tensor
    pyramid: FeaturePyramid


class FlowMVS(nn.Module):
    def __init__(self, cfg: Config) -> None:
        super().__init__()
        self.cfg = cfg
        self.features = FeatureNet(cfg.feature_widths)
        self.regularizer = CostRegularizer(cfg.feature_widths[2], cfg.regularizer_widths)
        levels = cfg.point_feature_levels
        in_ch = sum(cfg.feature_widths[j - 1] for j in levels) + 3
        self.flow = FlowNet(in_ch, cfg.edge_widths, cfg.head_widths, cfg.aggregation, cfg.ablate_edgeconv)

    def coarse_parameters(self) -> list[nn.Parameter]:
        return list(self.features.parameters()) + list(self.regularizer.parameters())

    def coarse(self, images: Tensor, views: Sequence[CameraView], planes: DepthPlaneSet):
        """``images``: ``(V, 3, H, W)``, view 0 is the reference."""
        pyramid = self.features(images)
        volume, _ = build_cost_volume(views[0], views, pyramid, planes)
        prob = regularize(self.regularizer, volume)
        return pyramid, prob, soft_argmin(prob, planes), photometric_confidence(prob)

    def forward(self, images: Tensor, views: Sequence[CameraView], planes: DepthPlaneSet,
                schedule: RefinementSchedule, *, knn_mode: str | None = None,
                roi_mask: Tensor | None = None, coarse_override: DepthMap | None = None,
                bounds: SceneBounds | None = None) -> Prediction:
        pyramid, prob, depth, conf = self.coarse(images, views, planes)
        if not bool(torch.isfinite(depth.values).all()):
            raise FloatingPointError("non-finite coarse depth")
        start = depth if coarse_override is None else coarse_override
        res = refine_iteratively(
            start, views, pyramid, self.flow, schedule,
            m=self.cfg.m, k=self.cfg.k, knn_mode=knn_mode or self.cfg.knn_mode,
            window=self.cfg.knn_window, levels=self.cfg.point_feature_levels,
            bounds=bounds, roi_mask=roi_mask, coarse_confidence=conf.detach(),
        )
        return Prediction(res.depths, res.confidences, prob, pyramid)


def images_tensor(images, dtype: torch.dtype = torch.float32) -> Tensor:
    """``(V, H, W, 3)`` array -> ``(V, 3, H, W)`` tensor."""
    return torch.as_tensor(images, dtype=dtype).permute(0, 3, 1, 2).contiguous()
