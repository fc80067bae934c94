"""File formats: PFM depth/confidence maps, binary PLY clouds, PNG images and masks."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel float map, little-endian (scale -1.0), bottom row first."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(arr)).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
        if dims is None:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = map(int, dims.groups())
        scale = float(f.readline().rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_ply(path: str | Path, points: np.ndarray, support: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 x/y/z and an optional uchar ``support`` count."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    n = len(pts)
    props = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if support is not None:
        props.append(("support", "u1"))
    rec = np.empty(n, dtype=props)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if support is not None:
        rec["support"] = np.clip(np.asarray(support).reshape(-1), 0, 255).astype("u1")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if support is not None:
        header.append("property uchar support")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
    "uint": "<u4", "float": "<f4", "double": "<f8", "float32": "<f4", "float64": "<f8",
    "uint8": "u1", "int32": "<i4",
}


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read vertices of a binary little-endian PLY. Returns ``(points, support)``."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        props: list[tuple[str, str]] = []
        fmt = None
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                props.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported")
        rec = np.frombuffer(f.read(np.dtype(props).itemsize * n), dtype=props, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    support = rec["support"].copy() if "support" in rec.dtype.names else None
    return pts, support


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an ``H x W x 3`` image in ``[0, 1]`` as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit single-channel mask; nonzero means selected."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) != 0
