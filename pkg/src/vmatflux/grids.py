"""Scalar grids, beam-plane stacks, and the VFT1 tensor container.

Conventions:
  - Grid3 values are indexed [z, y, x]; dims, origin and spacing are
    (x, y, z) triples in patient mm. The flat payload is x-fastest.
  - PlaneStack planes are indexed [cp, v, u] on the isocenter plane.
  - VFT1 container: 4-byte magic "VFT1", u32 LE ndim, ndim u64 LE dims
    in storage order, then row-major float32 LE payload. Grid and stack
    geometry rides in a "<stem>.geom.json" sidecar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

VFT_MAGIC = b"VFT1"

# default isocenter-plane raster: 64x64 px at 2.5 mm covers 160x160 mm
DEFAULT_PLANE_PX = 64
DEFAULT_PLANE_SPACING_MM = 2.5


class PlaneKind(str, Enum):
    FLUENCE = "fluence"
    BEV_DOSE = "bev_dose"


@dataclass(frozen=True)
class Grid3:
    """3D scalar field (dose or mask) on a regular patient-space grid."""

    values: np.ndarray  # (nz, ny, nx) float32
    origin_mm: tuple[float, float, float]  # center of voxel (0,0,0)
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 3:
            raise ShapeError(f"Grid3 values must be 3D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("Grid3 values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin_mm", tuple(float(c) for c in self.origin_mm))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if len(self.origin_mm) != 3 or len(self.spacing_mm) != 3:
            raise ShapeError("origin_mm and spacing_mm must be (x, y, z) triples")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacings must be positive, got {self.spacing_mm}")

    @classmethod
    def zeros(cls, dims: tuple[int, int, int], origin_mm, spacing_mm) -> Grid3:
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx), dtype=np.float32), origin_mm, spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel center coordinates along x, y, z in mm."""
        return tuple(self.origin_mm[a] + self.spacing_mm[a] * np.arange(self.dims[a])
                     for a in range(3))

    def same_geometry(self, other: Grid3) -> bool:
        return (self.dims == other.dims
                and self.origin_mm == other.origin_mm
                and self.spacing_mm == other.spacing_mm)

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Box enclosing the voxel volumes: half a voxel past the outer centers."""
        origin = np.asarray(self.origin_mm)
        spacing = np.asarray(self.spacing_mm)
        dims = np.asarray(self.dims, dtype=np.float64)
        return origin - spacing / 2, origin + (dims - 0.5) * spacing


@dataclass(frozen=True)
class PlaneGeometry:
    """Pixel raster on the isocenter plane, in beam (u, v) coordinates."""

    size_px: tuple[int, int]  # (nu, nv)
    spacing_mm: tuple[float, float]  # (du, dv)
    origin_mm: tuple[float, float]  # center of pixel (0,0)

    def __post_init__(self):
        object.__setattr__(self, "size_px", (int(self.size_px[0]), int(self.size_px[1])))
        object.__setattr__(self, "spacing_mm",
                           (float(self.spacing_mm[0]), float(self.spacing_mm[1])))
        object.__setattr__(self, "origin_mm",
                           (float(self.origin_mm[0]), float(self.origin_mm[1])))
        if self.size_px[0] < 1 or self.size_px[1] < 1:
            raise ValueError(f"size_px must be >= 1, got {self.size_px}")
        if self.spacing_mm[0] <= 0 or self.spacing_mm[1] <= 0:
            raise ValueError(f"spacings must be positive, got {self.spacing_mm}")

    @classmethod
    def centered(cls, nu: int = DEFAULT_PLANE_PX, nv: int | None = None,
                 du: float = DEFAULT_PLANE_SPACING_MM, dv: float | None = None) -> PlaneGeometry:
        """Raster centered on the isocenter."""
        nv = nu if nv is None else nv
        dv = du if dv is None else dv
        return cls((nu, nv), (du, dv), (-(nu - 1) / 2.0 * du, -(nv - 1) / 2.0 * dv))

    def u_coords(self) -> np.ndarray:
        return self.origin_mm[0] + self.spacing_mm[0] * np.arange(self.size_px[0])

    def v_coords(self) -> np.ndarray:
        return self.origin_mm[1] + self.spacing_mm[1] * np.arange(self.size_px[1])


@dataclass(frozen=True)
class PlaneStack:
    """Per-control-point planes sharing one isocenter-plane geometry."""

    geometry: PlaneGeometry
    planes: np.ndarray  # (n_cp, nv, nu) float32
    kind: PlaneKind

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float32)
        nu, nv = self.geometry.size_px
        if planes.ndim != 3 or planes.shape[1:] != (nv, nu):
            raise ShapeError(f"planes shape {planes.shape} does not match "
                             f"geometry (n_cp, {nv}, {nu})")
        if not np.all(np.isfinite(planes)):
            raise ValueError("plane values must be finite")
        kind = PlaneKind(self.kind)
        if kind is PlaneKind.FLUENCE and planes.size and planes.min() < 0:
            raise ValueError("fluence planes must be non-negative")
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "kind", kind)

    @property
    def n_cp(self) -> int:
        return self.planes.shape[0]


def _sidecar_path(path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".vft") else path.name
    return path.with_name(stem + ".geom.json")


def save_tensor(array: np.ndarray, path) -> None:
    """Write one array as a VFT1 file (float32, storage order)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VFT_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VFT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {VFT_MAGIC!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 8 * ndim
    if ndim < 1 or ndim > 8 or len(blob) < header_end:
        raise FormatError(f"{path}: bad ndim {ndim}")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 8)
    expected = int(np.prod(dims)) * 4
    payload = blob[header_end:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload size mismatch, "
                          f"expected {expected} bytes for dims {dims}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _write_sidecar(path, meta: dict) -> None:
    _sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def _read_sidecar(path) -> dict:
    side = _sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing geometry sidecar {side}")
    return json.loads(side.read_text())


def save_grid(grid: Grid3, path, kind: str = "dose") -> None:
    save_tensor(grid.values, path)
    _write_sidecar(path, {
        "kind": kind,
        "origin_mm": list(grid.origin_mm),
        "spacing_mm": list(grid.spacing_mm),
    })


def load_grid(path) -> Grid3:
    values = load_tensor(path)
    if values.ndim != 3:
        raise FormatError(f"{path}: expected a 3D grid, got ndim {values.ndim}")
    meta = _read_sidecar(path)
    if meta.get("kind") not in ("dose", "mask"):
        raise FormatError(f"{path}: sidecar kind {meta.get('kind')!r} is not a grid kind")
    return Grid3(values, tuple(meta["origin_mm"]), tuple(meta["spacing_mm"]))


def save_stack(stack: PlaneStack, path) -> None:
    save_tensor(stack.planes, path)
    geom = stack.geometry
    _write_sidecar(path, {
        "kind": stack.kind.value,
        "size_px": list(geom.size_px),
        "spacing_mm": list(geom.spacing_mm),
        "origin_mm": list(geom.origin_mm),
    })


def load_stack(path) -> PlaneStack:
    planes = load_tensor(path)
    if planes.ndim != 3:
        raise FormatError(f"{path}: expected a plane stack, got ndim {planes.ndim}")
    meta = _read_sidecar(path)
    try:
        kind = PlaneKind(meta.get("kind"))
    except ValueError:
        raise FormatError(f"{path}: sidecar kind {meta.get('kind')!r} "
                          f"is not a stack kind") from None
    geom = PlaneGeometry(tuple(meta["size_px"]), tuple(meta["spacing_mm"]),
                         tuple(meta["origin_mm"]))
    return PlaneStack(geom, planes, kind)
