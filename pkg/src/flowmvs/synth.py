"""Deterministic synthetic multi-view scenes with exact ground-truth depth.

Scenes are ray cast analytically (planes, spheres) or by marching plus
bisection (height fields). Surfaces carry a procedural value-noise albedo
sampled bilinearly from a texture image in world ``(x, y)`` so every view
sees the same colours. Cameras sit on a horizontal arc looking at the world
origin, with world ``+z`` pointing away from the cameras.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import CameraView, camera_direction, look_at_view, quantize_view, read_cam, write_cam
from .io import read_image, read_ply, read_pfm, write_image, write_pfm, write_ply

GEOMETRIES = ("plane", "heightfield", "sphere-set")
DEPTH_RANGE = (425.0, 921.0)
TEXTURE_EXTENT = 240.0  # half-width of the textured world region (mm)
TEXEL = 0.5  # mm


@dataclass(frozen=True)
class TextureSpec:
    wavelengths: tuple[float, ...] = (3.0, 6.0, 12.0, 24.0, 48.0)
    contrast: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    geometry: str = "heightfield"
    num_views: int = 5
    resolution: tuple[int, int] = (160, 128)
    seed: int = 0
    texture: TextureSpec = field(default_factory=TextureSpec)
    focal: float = 600.0
    distance: float = 650.0
    arc_step_deg: float = 12.0
    supersample: int = 2
    plane_depth: float | None = None
    plane_tilt_deg: tuple[float, float] | None = None

    def validate(self) -> None:
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.geometry!r}; expected one of {GEOMETRIES}")
        if self.num_views < 2:
            raise ValueError("a scene needs at least 2 views")
        w, h = self.resolution
        if w <= 0 or h <= 0 or w % 8 or h % 8:
            raise ValueError(f"resolution {self.resolution} must be positive and divisible by 8")
        if self.focal <= 0 or self.distance <= 0 or self.supersample < 1:
            raise ValueError("focal, distance and supersample must be positive")


@dataclass
class SceneBundle:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1], 8-bit quantised
    views: list[CameraView]
    gt_depths: np.ndarray  # (N, H, W) float64, 0 where invalid
    gt_cloud: np.ndarray  # (P, 3)
    depth_range: tuple[float, float]
    spec: dict = field(default_factory=dict)

    @property
    def gt_masks(self) -> np.ndarray:
        return self.gt_depths > 0

    @property
    def num_views(self) -> int:
        return len(self.views)


# -- surfaces -----------------------------------------------------------------


class Plane:
    def __init__(self, point, normal) -> None:
        self.point = np.asarray(point, float)
        n = np.asarray(normal, float)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((self.point - o) @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (lam > 0), lam, np.inf)


class Sphere:
    def __init__(self, center, radius: float) -> None:
        self.center = np.asarray(center, float)
        self.radius = float(radius)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        # Numerically stable root pair.
        q = -0.5 * (b + np.copysign(sq, b))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = q / a
            r2 = c / q
        lo = np.minimum(r1, r2)
        hi = np.maximum(r1, r2)
        lam = np.where(lo > 0, lo, np.where(hi > 0, hi, np.inf))
        return np.where(disc >= 0, lam, np.inf)


class HeightField:
    """``z = base + sum_i a_i exp(-|xy - c_i|^2 / (2 s_i^2))``."""

    def __init__(self, base: float, centers, amplitudes, sigmas) -> None:
        self.base = float(base)
        self.centers = np.asarray(centers, float).reshape(-1, 2)
        self.amplitudes = np.asarray(amplitudes, float).reshape(-1)
        self.sigmas = np.asarray(sigmas, float).reshape(-1)

    def height(self, xy: np.ndarray) -> np.ndarray:
        x, y = xy[..., 0], xy[..., 1]
        z = np.full(x.shape, self.base)
        for (cx, cy), a, s in zip(self.centers, self.amplitudes, self.sigmas):
            z += a * np.exp(((x - cx) ** 2 + (y - cy) ** 2) * (-0.5 / s**2))
        return z

    def intersect(self, o: np.ndarray, d: np.ndarray, step: float = 3.0, iters: int = 40) -> np.ndarray:
        """March the slab holding the surface, then bisect the first sign change.

        Rays must travel towards ``+z`` (``d[:, 2] > 0``), as all arc cameras do.
        """
        g = np.linspace(-TEXTURE_EXTENT, TEXTURE_EXTENT, 241)
        probe = self.height(np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2))
        z_lo, z_hi = probe.min() - 5.0, probe.max() + 5.0

        def f(lam, idx):
            p = o[idx] + lam[:, None] * d[idx]
            return p[:, 2] - self.height(p[:, :2])

        n = len(o)
        enter = np.maximum((z_lo - o[:, 2]) / d[:, 2], 0.0)
        leave = (z_hi - o[:, 2]) / d[:, 2]
        lam_lo = np.zeros(n)
        found = np.zeros(n, bool)
        cur = enter.copy()
        fprev = f(cur, np.arange(n))
        active = np.flatnonzero(fprev < 0)
        while len(active):
            nxt = cur[active] + step
            fcur = f(nxt, active)
            hit = fcur >= 0
            lam_lo[active[hit]] = cur[active[hit]]
            found[active[hit]] = True
            cur[active] = nxt
            active = active[~hit & (nxt < leave[active])]
        lo = lam_lo[found]
        hi = np.minimum(lo + step, leave[found])
        oo, dd = o[found], d[found]
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            p = oo + mid[:, None] * dd
            fm = p[:, 2] - self.height(p[:, :2])
            neg = fm < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        out = np.full(n, np.inf)
        out[found] = 0.5 * (lo + hi)
        return out


# -- textures -----------------------------------------------------------------


def make_texture(rng: np.random.Generator, spec: TextureSpec) -> np.ndarray:
    """``(T, T, 3)`` multi-octave value noise covering ``[-TEXTURE_EXTENT, TEXTURE_EXTENT]^2``."""
    size = int(round(2 * TEXTURE_EXTENT / TEXEL)) + 1
    tex = np.zeros((size, size, 3))
    total = 0.0
    for lam in spec.wavelengths:
        cells = int(math.ceil(2 * TEXTURE_EXTENT / lam)) + 4
        lattice = rng.uniform(-1.0, 1.0, size=(cells, cells, 3))
        coords = np.arange(size) * TEXEL / lam
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        for c in range(3):
            tex[..., c] += ndimage.map_coordinates(lattice[..., c], [yy, xx], order=3, mode="nearest")
        total += 1.0
    tex = tex / total
    tex = tex / (np.abs(tex).max() + 1e-12)
    return np.clip(0.5 + 0.45 * spec.contrast * tex, 0.0, 1.0)


def sample_texture(tex: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup at world ``(x, y)``; clamped outside the extent."""
    size = tex.shape[0]
    u = np.clip((xy[:, 0] + TEXTURE_EXTENT) / TEXEL, 0, size - 1)
    v = np.clip((xy[:, 1] + TEXTURE_EXTENT) / TEXEL, 0, size - 1)
    x0 = np.minimum(np.floor(u).astype(int), size - 2)
    y0 = np.minimum(np.floor(v).astype(int), size - 2)
    au = (u - x0)[:, None]
    av = (v - y0)[:, None]
    top = tex[y0, x0] * (1 - au) + tex[y0, x0 + 1] * au
    bot = tex[y0 + 1, x0] * (1 - au) + tex[y0 + 1, x0 + 1] * au
    return top * (1 - av) + bot * av


# -- scene construction -----------------------------------------------------


def arc_views(spec: SceneSpec) -> list[CameraView]:
    n = spec.num_views
    views = []
    for i in range(n):
        theta = math.radians((i - (n - 1) / 2) * spec.arc_step_deg)
        center = (spec.distance * math.sin(theta), 0.0, -spec.distance * math.cos(theta))
        views.append(quantize_view(look_at_view(center, (0.0, 0.0, 0.0), spec.focal, spec.resolution)))
    return views


def build_surfaces(spec: SceneSpec, rng: np.random.Generator, ref_view: CameraView) -> list:
    if spec.geometry == "plane":
        depth = spec.plane_depth if spec.plane_depth is not None else float(rng.uniform(600, 720))
        tilt = spec.plane_tilt_deg if spec.plane_tilt_deg is not None else tuple(rng.uniform(-30, 30, 2))
        axis = camera_direction(ref_view)
        point = ref_view.center + depth * axis
        ax, ay = (math.radians(a) for a in tilt)
        normal = np.array([math.sin(ax), math.sin(ay), -math.cos(ax) * math.cos(ay)])
        # Express the tilt relative to the reference camera frame.
        normal = ref_view.rotation.T @ normal
        return [Plane(point, normal)]
    if spec.geometry == "heightfield":
        n = int(rng.integers(5, 10))
        centers = rng.uniform(-90, 90, size=(n, 2))
        amps = rng.uniform(-60, 60, size=n)
        sigmas = rng.uniform(12, 40, size=n)
        return [HeightField(float(rng.uniform(-20, 40)), centers, amps, sigmas)]
    tilt = rng.uniform(-0.3, 0.3, 2)
    surfaces: list = [Plane((0.0, 0.0, float(rng.uniform(70, 130))), (tilt[0], tilt[1], -1.0))]
    for _ in range(int(rng.integers(3, 7))):
        r = float(rng.uniform(15, 40))
        c = (float(rng.uniform(-70, 70)), float(rng.uniform(-55, 55)), float(rng.uniform(-60, 30)))
        surfaces.append(Sphere(c, r))
    return surfaces


def pixel_rays(view: CameraView, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins and directions with unit camera-z component, so ray parameter = depth."""
    K, R = view.intrinsics, view.rotation
    y = (pixels[:, 1] - K[1, 2]) / K[1, 1]
    x = (pixels[:, 0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
    cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d = cam @ R
    return np.broadcast_to(view.center, d.shape).copy(), d


def raycast(surfaces: Sequence, view: CameraView, pixels: np.ndarray) -> np.ndarray:
    """Camera-frame depth of the first surface hit for each pixel (``inf`` if none)."""
    o, d = pixel_rays(view, np.asarray(pixels, float))
    lam = np.full(len(o), np.inf)
    for s in surfaces:
        lam = np.minimum(lam, s.intersect(o, d))
    return lam


def _render_view(surfaces, tex, view: CameraView, supersample: int):
    w, h = view.image_size
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    centers = np.stack([uu.ravel(), vv.ravel()], axis=1)
    depth = raycast(surfaces, view, centers)
    colour = np.zeros((len(centers), 3))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    for dy in offs:
        for dx in offs:
            px = centers + np.array([dx, dy])
            lam = raycast(surfaces, view, px)
            o, d = pixel_rays(view, px)
            hit = np.isfinite(lam)
            lam_safe = np.where(hit, lam, 0.0)
            pts = o + lam_safe[:, None] * d
            c = sample_texture(tex, pts[:, :2])
            colour += np.where(hit[:, None], c, 0.0)
    colour /= supersample**2
    valid = np.isfinite(depth) & (depth >= DEPTH_RANGE[0]) & (depth <= DEPTH_RANGE[1])
    depth = np.where(valid, depth, 0.0)
    return colour.reshape(h, w, 3), depth.reshape(h, w)


def unproject_np(view: CameraView, depth: np.ndarray) -> np.ndarray:
    """World points of all valid pixels of a full-resolution depth map."""
    h, w = depth.shape
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    sel = depth > 0
    o, d = pixel_rays(view, np.stack([uu[sel], vv[sel]], axis=1))
    return o + depth[sel][:, None] * d


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Render ``spec.num_views`` images with exact depth. Identical seeds give identical bundles."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    views = arc_views(spec)
    ref = views[(len(views) - 1) // 2]
    surfaces = build_surfaces(spec, rng, ref)
    tex = make_texture(rng, spec.texture)
    images, depths = [], []
    for view in views:
        img, dep = _render_view(surfaces, tex, view, spec.supersample)
        images.append(np.round(img * 255.0) / 255.0)
        depths.append(dep)
    cloud = np.concatenate([unproject_np(v, d) for v, d in zip(views, depths)])
    return SceneBundle(
        np.stack(images).astype(np.float32), views, np.stack(depths), cloud, DEPTH_RANGE,
        spec=_spec_dict(spec),
    )


def _spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["texture"] = asdict(spec.texture)
    return d


def scene_surfaces(spec: SceneSpec) -> list:
    """Rebuild the exact surfaces of ``spec`` (for analytic checks)."""
    rng = np.random.default_rng(spec.seed)
    views = arc_views(spec)
    return build_surfaces(spec, rng, views[(len(views) - 1) // 2])


def dataset_specs(count: int, seed: int, num_views: int = 5, resolution=(160, 128)) -> list[SceneSpec]:
    """A reproducible mix of scene types."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        geom = GEOMETRIES[(i + seed) % len(GEOMETRIES)]
        out.append(SceneSpec(geometry=geom, num_views=num_views, resolution=tuple(resolution),
                             seed=int(rng.integers(0, 2**31 - 1))))
    return out


def perturb_depth(values, valid_mask, sigma: float, seed: int):
    """Add i.i.d. zero-mean Gaussian noise to valid pixels (array in, array out)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    vals = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return vals.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=vals.shape)
    return np.where(np.asarray(valid_mask), vals + noise, vals)


# -- dataset layout -----------------------------------------------------------


def write_scene(bundle: SceneBundle, root: str | Path, planes: int = 48) -> Path:
    """Write ``images/``, ``cams/``, ``depths/`` (GT PFM), ``gt_cloud.ply`` and ``scene.json``."""
    root = Path(root)
    for sub in ("images", "cams", "depths"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    d_min, d_max = bundle.depth_range
    for i, view in enumerate(bundle.views):
        write_image(root / "images" / f"{i:08d}.png", bundle.images[i])
        write_cam(root / "cams" / f"{i:08d}_cam.txt", view, d_min, (d_max - d_min) / (planes - 1),
                  planes, d_max)
        write_pfm(root / "depths" / f"{i:08d}.pfm", bundle.gt_depths[i])
    write_ply(root / "gt_cloud.ply", bundle.gt_cloud)
    meta = {"num_views": bundle.num_views, "image_size": list(bundle.views[0].image_size),
            "depth_range": list(bundle.depth_range), "spec": bundle.spec}
    (root / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def load_scene(root: str | Path) -> SceneBundle:
    root = Path(root)
    try:
        meta = json.loads((root / "scene.json").read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{root}: not a scene directory (missing scene.json)") from exc
    size = tuple(meta["image_size"])
    n = meta["num_views"]
    views, images, depths = [], [], []
    rng_min, rng_max = [], []
    for i in range(n):
        view, rng = read_cam(root / "cams" / f"{i:08d}_cam.txt", size)
        views.append(view)
        rng_min.append(rng.depth_min)
        rng_max.append(rng.resolved_max(48))
        images.append(read_image(root / "images" / f"{i:08d}.png"))
        gt = root / "depths" / f"{i:08d}.pfm"
        depths.append(read_pfm(gt).astype(np.float64) if gt.exists() else np.zeros(size[::-1]))
    cloud_path = root / "gt_cloud.ply"
    cloud = read_ply(cloud_path)[0] if cloud_path.exists() else np.zeros((0, 3))
    return SceneBundle(np.stack(images), views, np.stack(depths), cloud,
                       (min(rng_min), max(rng_max)), spec=meta.get("spec", {}))


def select_views(views: Sequence[CameraView], ref: int, count: int) -> list[int]:
    """Reference index first, then the ``count - 1`` sources with the nearest camera centres."""
    if not 1 <= count <= len(views):
        raise ValueError(f"cannot select {count} views out of {len(views)}")
    c = views[ref].center
    dist = [(float(np.linalg.norm(v.center - c)), i) for i, v in enumerate(views) if i != ref]
    return [ref] + [i for _, i in sorted(dist)[: count - 1]]
