"""Simplified fluence-to-dose closure, dose MAE, and DVH curves.

forward_dose is the back-projection adjoint of the ray projector: every
voxel samples each control point's fluence at the voxel's divergent
projection onto the isocenter plane and accumulates it with
inverse-square weighting. It models no scatter or buildup (an optional
exponential attenuation knob exists, off by default); its job is closing
the fluence -> dose -> DVH loop, not clinical accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import imap_ordered
from .bev import beam_frame
from .errors import ShapeError
from .grids import Grid3, PlaneGeometry, PlaneStack
from .plans import VmatPlan

DVH_BINS = 256
DVH_HEADROOM = 1.05


def sample_bilinear(plane: np.ndarray, geom: PlaneGeometry,
                    u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear samples of one plane at (u, v) mm, zero outside."""
    nv, nu = plane.shape
    fu = (np.asarray(u, dtype=np.float64) - geom.origin_mm[0]) / geom.spacing_mm[0]
    fv = (np.asarray(v, dtype=np.float64) - geom.origin_mm[1]) / geom.spacing_mm[1]
    u0 = np.floor(fu).astype(np.int64)
    v0 = np.floor(fv).astype(np.int64)
    wu = fu - u0
    wv = fv - v0
    out = np.zeros(fu.shape, dtype=np.float64)
    for dv in (0, 1):
        row = v0 + dv
        ok_row = (row >= 0) & (row < nv)
        wgt_row = wv if dv else 1.0 - wv
        for du in (0, 1):
            col = u0 + du
            ok = ok_row & (col >= 0) & (col < nu)
            wgt = wgt_row * (wu if du else 1.0 - wu)
            vals = plane[row.clip(0, nv - 1), col.clip(0, nu - 1)]
            out += np.where(ok, wgt * vals, 0.0)
    return out


def forward_dose(fluence: PlaneStack, plan: VmatPlan, like: Grid3,
                 mu_per_mm: float = 0.0, threads: int | None = None) -> Grid3:
    """Accumulate back-projected fluence into a grid shaped like `like`.

    Each voxel's contribution from control point i is the fluence plane i
    sampled where the ray source->voxel pierces the isocenter plane,
    times (SAD / source-voxel distance)^2, optionally times
    exp(-mu_per_mm * (distance - SAD)).
    """
    if fluence.n_cp != plan.n_cp:
        raise ShapeError(f"fluence stack has {fluence.n_cp} planes "
                         f"for {plan.n_cp} control points")
    geom = fluence.geometry
    xs, ys, zs = like.axis_coords()
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    sad = plan.sad_mm

    def one(i: int) -> np.ndarray:
        cp = plan.control_points[i]
        frame = beam_frame(cp.gantry_deg, cp.collimator_deg, cp.couch_deg,
                           plan.isocenter_mm, sad)
        d = pts - frame.source_mm
        depth = d @ frame.axis
        if depth.min() <= 0.0:
            raise ValueError(f"CP {i}: grid reaches behind the beam source")
        u = sad * (d @ frame.u_axis) / depth
        v = sad * (d @ frame.v_axis) / depth
        w = sample_bilinear(fluence.planes[i], geom, u, v)
        dist2 = np.einsum("ij,ij->i", d, d)
        contrib = w * (sad * sad / dist2)
        if mu_per_mm != 0.0:
            contrib = contrib * np.exp(-mu_per_mm * (np.sqrt(dist2) - sad))
        return contrib

    acc = np.zeros(len(pts), dtype=np.float64)
    for contrib in imap_ordered(one, plan.n_cp, threads):
        acc += contrib
    return Grid3(acc.reshape(like.values.shape).astype(np.float32),
                 like.origin_mm, like.spacing_mm)


def mae_gy(dose_a: Grid3, dose_b: Grid3, mask: Grid3 | None = None) -> float:
    """Mean absolute voxel difference, over the mask when one is given."""
    if not dose_a.same_geometry(dose_b):
        raise ShapeError("dose grids do not share a geometry")
    diff = np.abs(dose_a.values.astype(np.float64)
                  - dose_b.values.astype(np.float64))
    if mask is None:
        return float(diff.mean())
    if not dose_a.same_geometry(mask):
        raise ShapeError("mask does not share the dose geometry")
    sel = mask.values > 0.5
    if not sel.any():
        raise ValueError("mask selects no voxels")
    return float(diff[sel].mean())


@dataclass(frozen=True)
class DvhCurve:
    """Cumulative dose-volume histogram for one structure."""

    structure: str
    dose_bins_gy: np.ndarray
    volume_fraction: np.ndarray

    def __post_init__(self):
        bins = np.array(self.dose_bins_gy, dtype=np.float64)
        frac = np.array(self.volume_fraction, dtype=np.float64)
        if bins.ndim != 1 or bins.shape != frac.shape:
            raise ShapeError("dose bins and volume fractions must be 1D "
                             "and the same length")
        if np.any(np.diff(bins) < 0):
            raise ValueError("dose bins must be ascending")
        if frac.size and (frac.min() < 0.0 or frac.max() > 1.0):
            raise ValueError("volume fractions must lie in [0, 1]")
        if np.any(np.diff(frac) > 0):
            raise ValueError("volume fractions must be non-increasing")
        bins.setflags(write=False)
        frac.setflags(write=False)
        object.__setattr__(self, "dose_bins_gy", bins)
        object.__setattr__(self, "volume_fraction", frac)


def dvh(dose: Grid3, mask: Grid3, structure: str = "target",
        n_bins: int = DVH_BINS, d_max_gy: float | None = None) -> DvhCurve:
    """Fraction of masked voxels at or above each dose level.

    Bins are uniform over [0, d_max_gy], defaulting to 1.05x the grid
    maximum so the curve always reaches zero.
    """
    if not dose.same_geometry(mask):
        raise ShapeError("mask does not share the dose geometry")
    if n_bins < 2:
        raise ValueError(f"n_bins must be at least 2, got {n_bins}")
    sel = mask.values > 0.5
    if not sel.any():
        raise ValueError("mask selects no voxels")
    vals = np.sort(dose.values[sel].astype(np.float64))
    if d_max_gy is None:
        d_max_gy = DVH_HEADROOM * float(dose.values.max())
    bins = np.linspace(0.0, d_max_gy, n_bins)
    at_or_above = vals.size - np.searchsorted(vals, bins, side="left")
    return DvhCurve(structure, bins, at_or_above / vals.size)


def dvh_to_csv(curve: DvhCurve) -> str:
    lines = ["dose_gy,volume_fraction"]
    lines += [f"{float(d)!r},{float(f)!r}"
              for d, f in zip(curve.dose_bins_gy, curve.volume_fraction)]
    return "\n".join(lines) + "\n"
