"""Finite-difference verification of the differentiable building blocks.

Each registered probe builds a small float64 problem, reduces the component's
output to a scalar with fixed random weights and compares autograd against
central differences on a random subset of input coordinates.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import Tensor

GRADIENT_CHECKS: dict[str, Callable[..., float]] = {}


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """``max |a - n| / max |n|`` (norm-wise relative error)."""
    scale = max(float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, coords: Tensor | None = None,
                            eps: float = 1e-5) -> float:
    """Central differences of scalar ``fn`` against autograd at ``coords`` (flat indices)."""
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    flat = x.detach().reshape(-1)
    idx = torch.arange(flat.numel()) if coords is None else coords
    numeric = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for n, i in enumerate(idx.tolist()):
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            numeric[n] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * eps)
    return relative_error(grad.reshape(-1)[idx], numeric)


def register_check(name: str):
    def deco(fn):
        GRADIENT_CHECKS[name] = fn
        return fn

    return deco


def gradient_check(component: str, probe_size: int = 32, seed: int = 0) -> float:
    """Max relative error between autograd and central differences for ``component``."""
    if component not in GRADIENT_CHECKS:
        raise KeyError(f"unknown component {component!r}; known: {sorted(GRADIENT_CHECKS)}")
    return GRADIENT_CHECKS[component](probe_size=probe_size, seed=seed)


def _coords(n: int, probe_size: int, gen: torch.Generator) -> Tensor:
    return torch.randperm(n, generator=gen)[: min(n, probe_size)]


def _weights(shape, gen: torch.Generator) -> Tensor:
    return torch.randn(shape, generator=gen, dtype=torch.float64)


@register_check("linear")
def _check_linear(probe_size: int, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(6, probe_size, generator=gen, dtype=torch.float64)
    w = _weights(6, gen)
    x = torch.randn(probe_size, generator=gen, dtype=torch.float64)
    return finite_difference_check(lambda t: w @ (a @ t), x)


@register_check("fetch_feature")
def _check_fetch_feature(probe_size: int, seed: int) -> float:
    from .feature import fetch_feature

    gen = torch.Generator().manual_seed(seed)
    c, h, w = 4, 7, 9
    fmap = torch.randn(c, h, w, generator=gen, dtype=torch.float64)
    # Keep queries away from integer coordinates, where bilinear weights kink.
    base = torch.randint(0, w - 1, (probe_size,), generator=gen).double()
    pix = torch.stack([base, torch.randint(0, h - 1, (probe_size,), generator=gen).double()], -1)
    pix = pix + 0.1 + 0.8 * torch.rand(probe_size, 2, generator=gen, dtype=torch.float64)
    wt = _weights((probe_size, c), gen)
    e1 = finite_difference_check(lambda p: (fetch_feature(fmap, p)[0] * wt).sum(), pix)
    e2 = finite_difference_check(lambda f: (fetch_feature(f, pix)[0] * wt).sum(), fmap,
                                 _coords(fmap.numel(), probe_size, gen))
    return max(e1, e2)


@register_check("variance_cost")
def _check_variance_cost(probe_size: int, seed: int) -> float:
    from .feature import variance_cost

    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(4, 5, 6, generator=gen, dtype=torch.float64)
    vis = torch.rand(4, 5, generator=gen) > 0.3
    vis[0] = True
    wt = _weights((5, 6), gen)
    coords = _coords(feats.numel(), probe_size, gen)
    e1 = finite_difference_check(lambda f: (variance_cost(f)[0] * wt).sum(), feats, coords)
    e2 = finite_difference_check(lambda f: (variance_cost(f, vis)[0] * wt).sum(), feats, coords)
    return max(e1, e2)


@register_check("soft_argmin")
def _check_soft_argmin(probe_size: int, seed: int) -> float:
    from .coarse_depth import make_planes, soft_argmin

    gen = torch.Generator().manual_seed(seed)
    planes = make_planes(425.0, 921.0, 16, torch.float64)
    logits = torch.randn(16, 3, 4, generator=gen, dtype=torch.float64)
    wt = _weights((3, 4), gen)

    def fn(x):
        return (soft_argmin(torch.softmax(x, 0), planes).values * wt).sum()

    return finite_difference_check(fn, logits, _coords(logits.numel(), probe_size, gen))


@register_check("expected_displacement")
def _check_expected_displacement(probe_size: int, seed: int) -> float:
    from .pointflow import expected_displacement

    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(20, 5, generator=gen, dtype=torch.float64)
    wt = _weights(20, gen)

    def fn(x):
        return (expected_displacement(torch.softmax(x, 1), 8.0, 2) * wt).sum()

    return finite_difference_check(fn, logits, _coords(logits.numel(), probe_size, gen))


@register_check("edge_conv")
def _check_edge_conv(probe_size: int, seed: int) -> float:
    from .pointflow import EdgeConv

    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    layer = EdgeConv(5, (8, 8)).double()
    x = torch.randn(30, 5, generator=gen, dtype=torch.float64)
    nbrs = torch.randint(0, 30, (30, 6), generator=gen)
    wt = _weights((30, 8), gen)
    return finite_difference_check(lambda t: (layer(t, nbrs) * wt).sum(), x,
                                   _coords(x.numel(), probe_size, gen))


def _tiny_scene(seed: int):
    """A 32x32 image set whose coarse depth map is 4x4."""
    from .synth import SceneSpec, arc_views

    spec = SceneSpec(geometry="plane", num_views=3, resolution=(32, 32), seed=seed, focal=150.0)
    return arc_views(spec)


@register_check("refine_chain")
def _check_refine_chain(probe_size: int, seed: int) -> float:
    """Mean refined depth after three flow iterations, w.r.t. features and coarse depth."""
    from .coarse_depth import DepthMap
    from .feature import FeaturePyramid
    from .pointflow import FlowNet, RefinementSchedule, coarse_bounds, refine_iteratively

    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    views = _tiny_scene(seed)
    widths = (4, 4, 4)
    levels = tuple(torch.randn(3, c, 32 >> j, 32 >> j, generator=gen, dtype=torch.float64)
                   for j, c in enumerate(widths, start=1))
    coarse = 650.0 + 3.0 * torch.randn(4, 4, generator=gen, dtype=torch.float64)
    net = FlowNet(sum(widths) + 3, (8, 8, 8), (8, 8)).double()
    schedule = RefinementSchedule((8.0, 4.0, 2.0), (1, 2, 2))
    mask = torch.ones(4, 4, dtype=torch.bool)
    bounds = coarse_bounds(DepthMap(coarse, mask, 1.0 / 8), views[0], schedule, 2)

    def run(lv, d, graphs=None, keep=False):
        res = refine_iteratively(DepthMap(d, mask, 1.0 / 8), views, FeaturePyramid(lv), net, schedule,
                                 m=2, k=16, knn_mode="windowed", window=9, keep_clouds=keep, graphs=graphs,
                                 bounds=bounds)
        return res if keep else res.depths[-1].values.mean()

    # Neighbour selection and the normalisation box are constants of the
    # chain (both built from detached values); hold them at the nominal input.
    graphs = run(levels, coarse, keep=True).graphs

    sizes = [t.numel() for t in levels]

    def split(flat):
        out, o = [], 0
        for t, n in zip(levels, sizes):
            out.append(flat[o : o + n].view_as(t))
            o += n
        return tuple(out)

    flat = torch.cat([t.reshape(-1) for t in levels])
    e1 = finite_difference_check(lambda f: run(split(f), coarse, graphs), flat,
                                 _coords(flat.numel(), probe_size, gen))
    e2 = finite_difference_check(lambda d: run(levels, d, graphs), coarse)
    return max(e1, e2)


@register_check("predict_flow")
def _check_predict_flow(probe_size: int, seed: int) -> float:
    """Weighted hypothesis probabilities of a 10-point cloud w.r.t. point features."""
    from .pointflow import FlowNet

    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = FlowNet(6, (8, 8, 8), (8, 8)).double()
    feats = torch.randn(2, 5, 6, generator=gen, dtype=torch.float64)
    nbrs = torch.stack([torch.randperm(10, generator=gen)[:4] for _ in range(10)])
    wt = _weights((2, 5), gen)
    return finite_difference_check(lambda f: (torch.softmax(net(f, nbrs), 1) * wt).sum(), feats,
                                   _coords(feats.numel(), probe_size, gen))


@register_check("coarse_chain")
def _check_coarse_chain(probe_size: int, seed: int) -> float:
    """Mean soft-argmin depth of a 4x4 coarse map w.r.t. the level-3 features."""
    from .coarse_depth import CostRegularizer, build_cost_volume, make_planes, regularize, soft_argmin
    from .feature import FeaturePyramid

    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    views = _tiny_scene(seed)
    planes = make_planes(600.0, 700.0, 8, torch.float64)
    reg = CostRegularizer(4, (4, 4, 4)).double()
    fine = tuple(torch.randn(3, 4, 32 >> j, 32 >> j, generator=gen, dtype=torch.float64) for j in (1, 2))
    top = torch.randn(3, 4, 4, 4, generator=gen, dtype=torch.float64)

    def fn(f3):
        vol, _ = build_cost_volume(views[0], views, FeaturePyramid(fine + (f3,)), planes)
        return soft_argmin(regularize(reg, vol), planes).values.mean()

    return finite_difference_check(fn, top, _coords(top.numel(), probe_size, gen))
