"""Pinhole camera model: projection, unprojection and intrinsic scaling.

Conventions used throughout the package:

* world units are millimetres;
* ``rotation``/``translation`` map world to camera, ``x_cam = R @ x_w + t``;
* a continuous pixel coordinate ``(u, v)`` has integer values at pixel
  centres, so pyramid level ``j`` sees full-resolution pixel ``x`` at
  ``x / 2**j`` (the centre of a stride-2, kernel-3, padding-1 convolution
  output ``i`` sits on input pixel ``2 i``);
* depth is the camera-frame ``z`` coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class CameraView:
    """Calibrated pinhole camera.

    ``image_size`` is ``(width, height)`` of the full-resolution image.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        K = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        w, h = self.image_size
        if int(w) != w or int(h) != h or w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive integers, got {self.image_size}")
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if np.any(K[np.tril_indices(3, -1)] != 0.0) or K[2, 2] != 1.0:
            raise ValueError("intrinsics must be upper-triangular with K[2, 2] == 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be strictly positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def tensors(self, dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(K, R, t)`` as torch tensors (cached per dtype)."""
        key = dtype
        if key not in self._cache:
            self._cache[key] = (
                torch.as_tensor(self.intrinsics, dtype=dtype),
                torch.as_tensor(self.rotation, dtype=dtype),
                torch.as_tensor(self.translation, dtype=dtype),
            )
        return self._cache[key]

    def scaled(self, factor: float) -> "CameraView":
        return scale_intrinsics(self, factor)


def scale_intrinsics(view: CameraView, factor: float) -> CameraView:
    """Scale focal lengths, skew and principal point by ``factor``.

    The image size follows the scaling (rounded up), extrinsics are untouched.
    """
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    K = view.intrinsics.copy()
    K[:2, :] *= factor
    w, h = view.image_size
    size = (max(1, int(np.ceil(w * factor - 1e-9))), max(1, int(np.ceil(h * factor - 1e-9))))
    return CameraView(K, view.rotation, view.translation, size)


def level_factor(level: int) -> float:
    if level not in (0, 1, 2, 3):
        raise ValueError(f"pyramid level must be in 0..3, got {level}")
    return 0.5**level


def camera_direction(view: CameraView) -> np.ndarray:
    """Unit world-frame vector along the camera's principal (z) axis."""
    d = view.rotation[2, :].copy()
    return d / np.linalg.norm(d)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def project(points, view: CameraView, level: int = 0, scale: float | None = None):
    """Project world points ``(..., 3)`` into ``view``.

    Returns ``(pixels (..., 2), depth (...), valid (...))``. Points with
    depth <= 0 are reported through ``valid`` instead of raising; their pixel
    coordinates are meaningless but finite.

    ``scale`` overrides ``level`` with an arbitrary intrinsic scale factor.
    """
    pts = _as_tensor(points)
    factor = level_factor(level) if scale is None else scale
    K, R, t = view.tensors(pts.dtype)
    cam = pts @ R.T + t
    z = cam[..., 2]
    valid = z > 0
    z_safe = torch.where(valid, z, torch.ones_like(z))
    x = cam[..., 0] / z_safe
    y = cam[..., 1] / z_safe
    u = factor * (K[0, 0] * x + K[0, 1] * y + K[0, 2])
    v = factor * (K[1, 1] * y + K[1, 2])
    return torch.stack([u, v], dim=-1), z, valid


def unproject(pixels, depth, view: CameraView, level: int = 0, scale: float | None = None) -> Tensor:
    """Lift pixels ``(..., 2)`` with depths ``(...)`` to world points ``(..., 3)``."""
    px = _as_tensor(pixels)
    d = _as_tensor(depth, px.dtype)
    if torch.any(d <= 0):
        raise ValueError("unproject requires strictly positive depth")
    factor = level_factor(level) if scale is None else scale
    K, R, t = view.tensors(px.dtype)
    fx, fy = K[0, 0] * factor, K[1, 1] * factor
    skew = K[0, 1] * factor
    cx, cy = K[0, 2] * factor, K[1, 2] * factor
    y = (px[..., 1] - cy) / fy
    x = (px[..., 0] - cx - skew * y) / fx
    cam = torch.stack([x * d, y * d, d], dim=-1)
    return (cam - t) @ R


def pixel_grid(height: int, width: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """``(H, W, 2)`` grid of ``(u, v)`` pixel-centre coordinates."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    return torch.stack([u, v], dim=-1)


# -- camera text files ------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def quantize_view(view: CameraView) -> CameraView:
    """Round all camera parameters to 9 significant digits.

    The quantized view is a fixed point of :func:`write_cam` / :func:`read_cam`.
    """
    q = np.vectorize(lambda x: float(_fmt(x)))
    return CameraView(q(view.intrinsics), q(view.rotation), q(view.translation), view.image_size)


def write_cam(path: str | Path, view: CameraView, depth_min: float, depth_interval: float,
              depth_num: int | None = None, depth_max: float | None = None) -> None:
    """Write a camera in the MVSNet text layout.

    The image size is not part of the layout and must be supplied on read.
    """
    E = np.eye(4)
    E[:3, :3] = view.rotation
    E[:3, 3] = view.translation
    lines = ["extrinsic"]
    lines += [" ".join(_fmt(x) for x in row) for row in E]
    lines += ["", "intrinsic"]
    lines += [" ".join(_fmt(x) for x in row) for row in view.intrinsics]
    depth_line = [_fmt(depth_min), _fmt(depth_interval)]
    if depth_num is not None:
        depth_line.append(str(int(depth_num)))
        depth_line.append(_fmt(depth_max if depth_max is not None
                               else depth_min + depth_interval * (depth_num - 1)))
    lines += ["", " ".join(depth_line), ""]
    Path(path).write_text("\n".join(lines))


@dataclass(frozen=True)
class DepthRange:
    depth_min: float
    depth_interval: float
    depth_num: int | None = None
    depth_max: float | None = None

    def resolved_max(self, default_num: int) -> float:
        if self.depth_max is not None:
            return self.depth_max
        n = self.depth_num if self.depth_num is not None else default_num
        return self.depth_min + self.depth_interval * (n - 1)


def read_cam(path: str | Path, image_size: tuple[int, int]) -> tuple[CameraView, DepthRange]:
    """Read an MVSNet-style camera file.

    The last line holds ``depth_min depth_interval`` optionally followed by
    ``depth_num depth_max``.
    """
    tokens = [ln.split() for ln in Path(path).read_text().splitlines()]
    tokens = [t for t in tokens if t]
    try:
        i = [t[0] for t in tokens].index("extrinsic")
        E = np.array([[float(x) for x in row] for row in tokens[i + 1 : i + 5]])
        j = [t[0] for t in tokens].index("intrinsic")
        K = np.array([[float(x) for x in row] for row in tokens[j + 1 : j + 4]])
        depth_tokens = tokens[j + 4]
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed camera file") from exc
    if E.shape != (4, 4) or K.shape != (3, 3):
        raise ValueError(f"{path}: malformed camera matrices")
    rng = DepthRange(
        float(depth_tokens[0]),
        float(depth_tokens[1]),
        int(float(depth_tokens[2])) if len(depth_tokens) > 2 else None,
        float(depth_tokens[3]) if len(depth_tokens) > 3 else None,
    )
    return CameraView(K, E[:3, :3], E[:3, 3], image_size), rng


def look_at_view(center, target, focal: float, image_size: tuple[int, int],
                 up=(0.0, -1.0, 0.0)) -> CameraView:
    """Camera at ``center`` looking at ``target`` (image y axis roughly along ``up``'s opposite)."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = -x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    w, h = image_size
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    return CameraView(K, R, -R @ c, image_size)
