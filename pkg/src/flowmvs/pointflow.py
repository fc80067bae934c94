"""Point-hypothesis refinement: hypotheses, edge convolution, flow prediction and the iterative driver."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .coarse_depth import NORMALIZATION_TOL, DepthMap
from .feature import FeaturePyramid, SceneBounds, augment_point, fetch_multiview_variance, project_to_views, relu_init
from .geometry import CameraView, camera_direction, pixel_grid, unproject
from .knn import knn_exhaustive, knn_windowed

KNN_MODES = ("exhaustive", "windowed")
AGGREGATIONS = ("max", "avg")


@dataclass
class HypothesisCloud:
    """Unprojected base points and their ``2m + 1`` displaced hypotheses.

    ``pixel_index`` is the linear index (row-major, ``grid_shape``) of the
    pixel each base point came from. Base points are ordered by it.
    """

    base_points: Tensor
    pixel_index: Tensor
    grid_shape: tuple[int, int]
    hypotheses: Tensor
    step: float
    m: int
    direction: Tensor
    features: Tensor | None = None
    valid: Tensor | None = None

    @property
    def num_base(self) -> int:
        return self.base_points.shape[0]

    @property
    def num_hypotheses(self) -> int:
        return 2 * self.m + 1

    @property
    def num_points(self) -> int:
        return self.num_base * self.num_hypotheses

    @property
    def offsets(self) -> Tensor:
        return hypothesis_offsets(self.step, self.m, self.base_points.dtype)


@dataclass
class KnnGraph:
    neighbor_indices: Tensor
    k: int


@dataclass(frozen=True)
class RefinementSchedule:
    """Per-iteration hypothesis step sizes (mm) and upsampling factors."""

    step_sizes: tuple[float, ...]
    upsample_factors: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        steps = tuple(float(s) for s in self.step_sizes)
        ups = tuple(int(u) for u in self.upsample_factors) or (1,) + (2,) * max(0, len(steps) - 1)
        ups = ups[: len(steps)] if len(steps) else ()
        if len(ups) != len(steps):
            raise ValueError("one upsampling factor per iteration is required")
        if any(s <= 0 for s in steps):
            raise ValueError("step sizes must be positive")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"step sizes must be strictly decreasing, got {steps}")
        if any(u not in (1, 2) for u in ups):
            raise ValueError(f"upsampling factors must be 1 or 2, got {ups}")
        object.__setattr__(self, "step_sizes", steps)
        object.__setattr__(self, "upsample_factors", ups)

    @property
    def iterations(self) -> int:
        return len(self.step_sizes)

    def truncated(self, iterations: int) -> "RefinementSchedule":
        if not 0 <= iterations <= self.iterations:
            raise ValueError(f"schedule has {self.iterations} iterations, asked for {iterations}")
        return RefinementSchedule(self.step_sizes[:iterations], self.upsample_factors[:iterations])


def hypothesis_offsets(step: float, m: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """Signed displacements ``k * step`` for ``k = -m .. m``."""
    return torch.arange(-m, m + 1, dtype=dtype) * step


def generate_hypotheses(depth: DepthMap, ref_view: CameraView, step: float, m: int,
                        mask: Tensor | None = None) -> HypothesisCloud:
    """Unproject valid pixels (optionally restricted to ``mask``) and displace along the camera axis."""
    if not step > 0:
        raise ValueError(f"hypothesis step must be positive, got {step}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    values = depth.values
    dtype = values.dtype
    h, w = depth.shape
    sel = depth.valid_mask if mask is None else depth.valid_mask & mask
    pixel_index = sel.reshape(-1).nonzero().flatten()
    t = torch.as_tensor(camera_direction(ref_view), dtype=dtype)
    if len(pixel_index) == 0:
        empty = values.new_zeros((0, 3))
        return HypothesisCloud(empty, pixel_index, (h, w), values.new_zeros((0, 2 * m + 1, 3)), step, m, t)
    uv = pixel_grid(h, w, dtype).reshape(-1, 2)[pixel_index]
    d = values.reshape(-1)[pixel_index]
    base = unproject(uv, d, ref_view, scale=depth.scale)
    offsets = hypothesis_offsets(step, m, dtype)
    hyps = base.unsqueeze(1) + offsets.view(1, -1, 1) * t
    return HypothesisCloud(base, pixel_index, (h, w), hyps, step, m, t)


def build_knn_graph(cloud: HypothesisCloud, k: int = 16, mode: str = "windowed", window: int = 9) -> KnnGraph:
    """Directed kNN graph over all hypothesis points (index ``b * (2m+1) + j``)."""
    if mode not in KNN_MODES:
        raise ValueError(f"unknown kNN mode {mode!r}; expected one of {KNN_MODES}")
    pts = cloud.hypotheses.detach()
    if mode == "exhaustive":
        idx = knn_exhaustive(pts.reshape(-1, 3), k)
    else:
        h, w = cloud.grid_shape
        mm = cloud.num_hypotheses
        grid = pts.new_zeros((h * w, mm, 3))
        grid[cloud.pixel_index] = pts
        point_index = torch.full((h * w,), -1, dtype=torch.long)
        point_index[cloud.pixel_index] = torch.arange(cloud.num_base)
        idx = knn_windowed(grid.view(h, w, mm, 3), point_index.view(h, w), k, window)
    return KnnGraph(idx, k)


def _mlp(widths: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers)


def _aggregate(x: Tensor, mode: str) -> Tensor:
    return x.max(dim=1).values if mode == "max" else x.mean(dim=1)


class EdgeConv(nn.Module):
    """Edge convolution with a shared two-layer perceptron.

    Geometry-aware mode aggregates ``h([C_p, C_p - C_q])`` over neighbours;
    the ablated mode aggregates ``h(C_q)`` and never looks at the centre.
    """

    def __init__(self, in_channels: int, widths: Sequence[int] = (64, 64), aggregation: str = "max",
                 geometry_aware: bool = True) -> None:
        super().__init__()
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        self.in_channels = in_channels
        self.aggregation = aggregation
        self.geometry_aware = geometry_aware
        first_in = 2 * in_channels if geometry_aware else in_channels
        self.first = nn.Linear(first_in, widths[0])
        self.rest = _mlp(list(widths))
        self.out_channels = widths[-1]

    def forward(self, x: Tensor, neighbors: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        if self.geometry_aware:
            c = self.in_channels
            wa, wb = self.first.weight[:, :c], self.first.weight[:, c:]
            # Linear in [x_p, x_p - x_q] splits into a centre and a neighbour term.
            centre = F.linear(x, wa + wb, self.first.bias)
            nbr = F.linear(x, wb)
            e = torch.relu(centre.unsqueeze(1) - nbr[neighbors])
            return _aggregate(self.rest(e), self.aggregation)
        y = self.rest(torch.relu(self.first(x)))
        return _aggregate(y[neighbors], self.aggregation)

    def forward_reference(self, x: Tensor, neighbors: Tensor) -> Tensor:
        """Per-edge loop evaluation, used to check :meth:`forward`."""
        out = []
        for p in range(x.shape[0]):
            edges = []
            for q in neighbors[p].tolist():
                inp = torch.cat([x[p], x[p] - x[q]]) if self.geometry_aware else x[q]
                edges.append(self.rest(torch.relu(self.first(inp))))
            stack = torch.stack(edges)
            out.append(stack.max(0).values if self.aggregation == "max" else stack.mean(0))
        return torch.stack(out)


def edge_conv(features: Tensor, graph: KnnGraph, layer: EdgeConv) -> Tensor:
    if not layer.geometry_aware:
        raise ValueError("layer is configured for geometry-unaware aggregation")
    return layer(features, graph.neighbor_indices)


def edge_conv_ablated(features: Tensor, graph: KnnGraph, layer: EdgeConv) -> Tensor:
    if layer.geometry_aware:
        raise ValueError("layer is configured for geometry-aware aggregation")
    return layer(features, graph.neighbor_indices)


class FlowNet(nn.Module):
    """Three edge convolutions, shortcut concatenation and a per-point head to one logit."""

    def __init__(self, in_channels: int, edge_widths: Sequence[int] = (64, 64, 64),
                 head_widths: Sequence[int] = (128, 64), aggregation: str = "max",
                 ablate_edgeconv: bool = False) -> None:
        super().__init__()
        self.in_channels = in_channels
        convs = []
        cin = in_channels
        for w in edge_widths:
            convs.append(EdgeConv(cin, (w, w), aggregation, geometry_aware=not ablate_edgeconv))
            cin = w
        self.convs = nn.ModuleList(convs)
        self.head = nn.Sequential(_mlp([sum(edge_widths), *head_widths]), nn.Linear(head_widths[-1], 1))
        relu_init(self)

    def forward(self, features: Tensor, neighbors: Tensor) -> Tensor:
        """``features``: ``(P, M, C)`` -> logits ``(P, M)``."""
        p, mm, c = features.shape
        x = features.reshape(p * mm, c)
        outs = []
        for conv in self.convs:
            x = conv(x, neighbors)
            outs.append(x)
        return self.head(torch.cat(outs, dim=-1)).view(p, mm)


def predict_flow(cloud: HypothesisCloud, net: FlowNet, graph: KnnGraph) -> Tensor:
    """Softmax over each base point's hypotheses; rows sum to one.

    Hypotheses seen by no source view are excluded; a point with none left
    gets a uniform row, hence zero displacement.
    """
    if cloud.features is None:
        raise ValueError("hypothesis features have not been fetched")
    logits = net(cloud.features, graph.neighbor_indices)
    if cloud.valid is not None:
        logits = logits.masked_fill(~cloud.valid, float("-inf"))
        dead = ~cloud.valid.any(dim=1, keepdim=True)
        logits = torch.where(dead, torch.zeros_like(logits), logits)
    return torch.softmax(logits, dim=1)


def expected_displacement(probs: Tensor, step: float, m: int) -> Tensor:
    """Probability-weighted mean displacement per base point (mm)."""
    if probs.shape[-1] != 2 * m + 1:
        raise ValueError(f"expected {2 * m + 1} hypotheses per row, got {probs.shape[-1]}")
    if probs.numel() and (probs.detach().sum(-1) - 1.0).abs().max() > NORMALIZATION_TOL:
        raise ValueError("probability rows are not normalised")
    return probs @ hypothesis_offsets(step, m, probs.dtype)


def apply_residual(depth: DepthMap, displacement: Tensor) -> DepthMap:
    """Add a per-pixel displacement map to the valid pixels."""
    if displacement.shape != depth.values.shape:
        raise ValueError("displacement map must match the depth map")
    values = torch.where(depth.valid_mask, depth.values + displacement, depth.values)
    return DepthMap(values, depth.valid_mask, depth.scale)


def scatter_to_map(values: Tensor, pixel_index: Tensor, shape: tuple[int, int], fill=0.0) -> Tensor:
    out = values.new_full((shape[0] * shape[1],), fill)
    return out.index_put((pixel_index,), values).view(shape)


def upsample_depth(depth: DepthMap, factor: int = 2) -> DepthMap:
    """Nearest-neighbour upsampling of depth and validity."""
    if factor != 2:
        raise ValueError(f"unsupported upsampling factor {factor}")
    v = depth.values.repeat_interleave(2, 0).repeat_interleave(2, 1)
    m = depth.valid_mask.repeat_interleave(2, 0).repeat_interleave(2, 1)
    return DepthMap(v, m, depth.scale * 2)


def upsample_map(x: Tensor, factor: int = 2) -> Tensor:
    return x.repeat_interleave(factor, 0).repeat_interleave(factor, 1)


def resample_mask(mask: Tensor, shape: tuple[int, int]) -> Tensor:
    """Nearest (stride) resampling of a boolean mask to ``shape``."""
    h, w = mask.shape
    th, tw = shape
    if (h, w) == (th, tw):
        return mask
    ys = (torch.arange(th) * h) // th
    xs = (torch.arange(tw) * w) // tw
    return mask[ys][:, xs]


def roi_influence_radius(window: int, num_layers: int = 3) -> int:
    """Pixels (at one iteration's resolution) over which an ROI boundary can reach inward.

    Each edge convolution gathers from one kNN window, so stacked layers
    widen the dependency by ``window // 2`` per layer.
    """
    return num_layers * (window // 2)


def dilate_mask(mask: Tensor, radius: int) -> Tensor:
    """Chessboard dilation of a boolean map."""
    if radius <= 0:
        return mask.clone()
    x = mask.to(torch.float32).view(1, 1, *mask.shape)
    return F.max_pool2d(x, 2 * radius + 1, stride=1, padding=radius)[0, 0] > 0


def roi_context_masks(roi_mask: Tensor, shapes: Sequence[tuple[int, int]], upsample: Sequence[int],
                      radius: int) -> list[Tensor]:
    """Pixels each iteration must refine so that every ROI pixel matches an unmasked run.

    ``shapes[i]`` is the grid of iteration ``i + 1``. Working backwards, an
    iteration refines its ROI plus every pixel the later iterations read,
    dilated by the per-iteration dependency ``radius``.
    """
    need = resample_mask(roi_mask, shapes[-1])
    out: list[Tensor] = [None] * len(shapes)
    for i in range(len(shapes) - 1, -1, -1):
        out[i] = dilate_mask(need, radius)
        if i == 0:
            break
        parents = out[i]
        if upsample[i] == 2:
            h, w = parents.shape
            parents = parents.view(h // 2, 2, w // 2, 2).any(3).any(1)
        need = parents | resample_mask(roi_mask, shapes[i - 1])
    return out


@dataclass
class RefinementResult:
    depths: list[DepthMap]
    confidences: list[Tensor]
    clouds: list[HypothesisCloud] = field(default_factory=list)
    graphs: list[KnnGraph] = field(default_factory=list)


def hypothesis_features(cloud: HypothesisCloud, views: Sequence[CameraView], pyramid: FeaturePyramid,
                        bounds: SceneBounds, levels: Sequence[int] = (1, 2, 3)) -> HypothesisCloud:
    """Fetch multi-view variance and normalised coordinates at every hypothesis."""
    pts = cloud.hypotheses
    projection = project_to_views(pts, views)
    var, _ = fetch_multiview_variance(pts, views, pyramid, tuple(levels), projection=projection)
    cloud.features = augment_point(var, pts, bounds)
    cloud.valid = projection[1][1:].any(dim=0)
    return cloud


def coarse_bounds(coarse: DepthMap, ref_view: CameraView, schedule: RefinementSchedule, m: int) -> SceneBounds:
    """Normalisation box from the coarse cloud, padded by the largest reachable displacement."""
    if not bool(coarse.valid_mask.any()):
        raise ValueError("coarse depth map has no valid pixel")
    pix = pixel_grid(*coarse.shape, coarse.values.dtype)[coarse.valid_mask]
    pts = unproject(pix, coarse.values.detach()[coarse.valid_mask], ref_view, scale=coarse.scale)
    reach = m * sum(schedule.step_sizes) if schedule.iterations else 1.0
    return SceneBounds.from_points(pts, margin=reach + 1.0)


def refine_iteratively(coarse: DepthMap, views: Sequence[CameraView], pyramid: FeaturePyramid,
                       net: FlowNet, schedule: RefinementSchedule, *, m: int = 2, k: int = 16,
                       knn_mode: str = "windowed", window: int = 9, levels: Sequence[int] = (1, 2, 3),
                       bounds: SceneBounds | None = None, roi_mask: Tensor | None = None,
                       coarse_confidence: Tensor | None = None, keep_clouds: bool = False,
                       graphs: Sequence[KnnGraph] | None = None) -> RefinementResult:
    """Run ``schedule.iterations`` flow iterations starting from ``coarse``.

    ``views[0]`` is the reference. Pixels outside ``roi_mask`` (resampled to
    each iteration's resolution) are carried through unchanged; ROI pixels are
    refined together with a context ring so that, in windowed mode, they match
    an unmasked run exactly. ``graphs``
    replaces the per-iteration kNN search with fixed graphs (gradient checks).
    """
    if bounds is None and schedule.iterations:
        bounds = coarse_bounds(coarse, views[0], schedule, m)
    conf = coarse_confidence if coarse_confidence is not None else torch.ones_like(coarse.values)
    result = RefinementResult([coarse], [conf])
    context = None
    if roi_mask is not None and schedule.iterations:
        shapes, (h, w) = [], coarse.shape
        for up in schedule.upsample_factors:
            h, w = h * up, w * up
            shapes.append((h, w))
        context = roi_context_masks(roi_mask, shapes, schedule.upsample_factors,
                                    roi_influence_radius(window, len(net.convs)))
    # ``work`` is refined on the context region; ``depth`` only takes ROI pixels from it.
    depth = work = coarse
    for it, (step, up) in enumerate(zip(schedule.step_sizes, schedule.upsample_factors)):
        if up == 2:
            depth, work = upsample_depth(depth), upsample_depth(work)
            conf = upsample_map(conf)
        region = None if context is None else context[it]
        cloud = generate_hypotheses(work, views[0], step, m, region)
        if cloud.num_points < k + 1:
            result.depths.append(depth)
            result.confidences.append(conf)
            continue
        hypothesis_features(cloud, views, pyramid, bounds, levels)
        graph = build_knn_graph(cloud, k, knn_mode, window) if graphs is None else graphs[it]
        probs = predict_flow(cloud, net, graph)
        disp = expected_displacement(probs, step, m)
        work = apply_residual(work, scatter_to_map(disp, cloud.pixel_index, work.shape))
        point_conf = torch.where(cloud.valid.any(1), probs.detach().max(1).values, torch.zeros_like(disp))
        conf_index = cloud.pixel_index
        if context is None:
            depth = work
        else:
            roi = resample_mask(roi_mask, work.shape)
            depth = DepthMap(torch.where(roi, work.values, depth.values), depth.valid_mask, depth.scale)
            keep = roi.reshape(-1)[conf_index]
            conf_index, point_conf = conf_index[keep], point_conf[keep]
        conf = conf.detach().clone().reshape(-1).index_put((conf_index,), point_conf).view(depth.shape)
        result.depths.append(depth)
        result.confidences.append(conf)
        if keep_clouds:
            result.clouds.append(cloud)
            result.graphs.append(graph)
    return result
