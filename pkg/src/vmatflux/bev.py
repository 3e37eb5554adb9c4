"""Beam geometry and beam's-eye-view ray projection.

Patient coordinates are LPS (x left, y posterior, z superior), in mm.
Gantry rotation moves the source about +z: gantry 0 puts it anterior at
iso + (0, -SAD, 0), gantry 90 at iso + (SAD, 0, 0). Couch rotation is
about +y through the isocenter; the collimator spins the in-plane axes
about the beam axis. {u_axis, v_axis, axis} is orthonormal right-handed,
and with collimator 0 the v axis lies along +z at gantry 0.

Projection is divergent (cone) geometry: one ray per plane pixel, from
the source through the pixel's point on the isocenter plane, integrated
through the grid by midpoint sampling (trilinear, zero outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import map_ordered
from .grids import Grid3, PlaneGeometry, PlaneKind, PlaneStack
from .plans import VmatPlan

DEFAULT_STEP_MM = 1.0


@dataclass(frozen=True)
class BeamFrame:
    source_mm: np.ndarray
    axis: np.ndarray  # unit, source -> isocenter
    u_axis: np.ndarray
    v_axis: np.ndarray


def _rot_y(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def beam_frame(gantry_deg: float, collimator_deg: float, couch_deg: float,
               isocenter_mm, sad_mm: float = 1000.0) -> BeamFrame:
    """Source position and collimator-rotated in-plane axes for one CP."""
    if sad_mm <= 0:
        raise ValueError(f"sad_mm must be positive, got {sad_mm}")
    g = np.radians(gantry_deg)
    c = np.radians(collimator_deg)
    iso = np.asarray(isocenter_mm, dtype=np.float64)
    src_dir = np.array([np.sin(g), -np.cos(g), 0.0])
    u0 = np.array([-np.cos(g), -np.sin(g), 0.0])
    v0 = np.array([0.0, 0.0, 1.0])
    # collimator: right-hand rotation of u toward v about the beam axis
    u1 = np.cos(c) * u0 + np.sin(c) * v0
    v1 = -np.sin(c) * u0 + np.cos(c) * v0
    r_couch = _rot_y(couch_deg)
    source = iso + sad_mm * (r_couch @ src_dir)
    axis = r_couch @ (-src_dir)
    return BeamFrame(source, axis, r_couch @ u1, r_couch @ v1)


def sample_trilinear(grid: Grid3, pts_mm: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid values at (N, 3) xyz points, 0 outside."""
    vals = grid.values
    nz, ny, nx = vals.shape
    fx = (pts_mm[:, 0] - grid.origin_mm[0]) / grid.spacing_mm[0]
    fy = (pts_mm[:, 1] - grid.origin_mm[1]) / grid.spacing_mm[1]
    fz = (pts_mm[:, 2] - grid.origin_mm[2]) / grid.spacing_mm[2]
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    z0 = np.floor(fz).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    wz = fz - z0
    out = np.zeros(len(pts_mm), dtype=np.float64)
    for dz in (0, 1):
        z = z0 + dz
        okz = (z >= 0) & (z < nz)
        wgtz = wz if dz else 1.0 - wz
        for dy in (0, 1):
            y = y0 + dy
            oky = okz & (y >= 0) & (y < ny)
            wgty = wy if dy else 1.0 - wy
            for dx in (0, 1):
                x = x0 + dx
                ok = oky & (x >= 0) & (x < nx)
                wgt = wgtz * wgty * (wx if dx else 1.0 - wx)
                corner = vals[z.clip(0, nz - 1), y.clip(0, ny - 1), x.clip(0, nx - 1)]
                out += np.where(ok, wgt * corner, 0.0)
    return out


def _ray_box_spans(src: np.ndarray, dirs: np.ndarray,
                   lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of rays (N, 3) into the box; exit<entry = miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - src[None, :]) / dirs
        t2 = (hi[None, :] - src[None, :]) / dirs
    near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=1)
    far = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=1)
    # a ray parallel to a slab and outside it never hits the box
    outside = (np.abs(dirs) < 1e-300) & ((src[None, :] < lo) | (src[None, :] > hi))
    far = np.where(outside.any(axis=1), -np.inf, far)
    return np.maximum(near, 0.0), far


def _project_one(grid: Grid3, frame: BeamFrame, iso: np.ndarray,
                 geom: PlaneGeometry, step_mm: float) -> np.ndarray:
    nu, nv = geom.size_px
    uu, vv = np.meshgrid(geom.u_coords(), geom.v_coords())
    pts = iso + uu[..., None] * frame.u_axis + vv[..., None] * frame.v_axis
    pts = pts.reshape(-1, 3)
    dirs = pts - frame.source_mm
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = grid.bounds_mm()
    near, far = _ray_box_spans(frame.source_mm, dirs, lo, hi)
    length = np.maximum(far - near, 0.0)
    length = np.where(np.isfinite(length), length, 0.0)
    # each ray takes uniform substeps covering exactly its chord length
    steps = np.ceil(length / step_mm).astype(np.int64)
    n_max = int(steps.max()) if len(steps) else 0
    if n_max == 0:
        return np.zeros((nv, nu))
    dt = np.where(steps > 0, length / np.maximum(steps, 1), 0.0)
    k = np.arange(n_max, dtype=np.float64)
    tt = near[:, None] + (k[None, :] + 0.5) * dt[:, None]
    sample_pts = frame.source_mm + dirs[:, None, :] * tt[..., None]
    vals = sample_trilinear(grid, sample_pts.reshape(-1, 3))
    vals = vals.reshape(len(pts), n_max)
    in_chord = k[None, :] < steps[:, None]
    return (np.where(in_chord, vals, 0.0).sum(axis=1) * dt).reshape(nv, nu)


def project_dose(grid: Grid3, plan: VmatPlan, geom: PlaneGeometry,
                 step_mm: float = DEFAULT_STEP_MM,
                 threads: int | None = None) -> PlaneStack:
    """Per-CP line integrals of the grid along divergent rays, (n_cp, nv, nu)."""
    if step_mm <= 0:
        raise ValueError(f"step_mm must be positive, got {step_mm}")
    lo, hi = grid.bounds_mm()
    iso = np.asarray(plan.isocenter_mm, dtype=np.float64)

    def one(i: int) -> np.ndarray:
        cp = plan.control_points[i]
        frame = beam_frame(cp.gantry_deg, cp.collimator_deg, cp.couch_deg,
                           plan.isocenter_mm, plan.sad_mm)
        if np.all(frame.source_mm >= lo) and np.all(frame.source_mm <= hi):
            raise ValueError(f"CP {i}: source {frame.source_mm} lies inside the grid")
        return _project_one(grid, frame, iso, geom, step_mm)

    planes = map_ordered(one, plan.n_cp, threads)
    return PlaneStack(geom, np.stack(planes).astype(np.float32), PlaneKind.BEV_DOSE)


def rotate_grid_about_gantry_axis(grid: Grid3, angle_deg: float,
                                  isocenter_mm=(0.0, 0.0, 0.0)) -> Grid3:
    """Rotate the field about +z through the isocenter (trilinear resample)."""
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    iso = np.asarray(isocenter_mm, dtype=np.float64)
    xs, ys, zs = grid.axis_coords()
    xx = np.broadcast_to(xs[None, None, :], grid.values.shape)
    yy = np.broadcast_to(ys[None, :, None], grid.values.shape)
    zz = np.broadcast_to(zs[:, None, None], grid.values.shape)
    dx = xx - iso[0]
    dy = yy - iso[1]
    # inverse mapping: each output voxel pulls from the pre-rotation point
    sx = c * dx + s * dy + iso[0]
    sy = -s * dx + c * dy + iso[1]
    pts = np.stack([sx.ravel(), sy.ravel(), zz.ravel()], axis=1)
    vals = sample_trilinear(grid, pts).reshape(grid.values.shape)
    return Grid3(vals.astype(np.float32), grid.origin_mm, grid.spacing_mm)
