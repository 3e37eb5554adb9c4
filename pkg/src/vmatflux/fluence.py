"""Per-control-point fluence rasterization.

Models closed-leaf transmission and leaf motion between control points;
tongue-and-groove is out of scope. The aperture raster is analytic: open
leaf rectangles are disjoint across pairs, so each pixel's open fraction
is a sum over pairs of (u overlap / du) x (v overlap / dv), exact for
axis-aligned rectangles.

A control point's map integrates motion over its attributed gantry
interval [midpoint(i-1, i), midpoint(i, i+1)], clamped at the arc ends.
Leaf tips move linearly in gantry angle between control points and the
control point's whole mu_weight is spread uniformly over the interval's
substeps, so each map scales with its mu_weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import map_ordered
from .grids import PlaneGeometry, PlaneKind, PlaneStack
from .machines import MachineModel
from .plans import VmatPlan

DEFAULT_SUBSTEPS = 8


@dataclass(frozen=True)
class ApertureSample:
    """Leaf tips at one instant plus the MU attributed to the sample."""

    leaf_left_mm: np.ndarray
    leaf_right_mm: np.ndarray
    mu_fraction: float = 0.0

    def __post_init__(self):
        left = np.array(self.leaf_left_mm, dtype=np.float64)
        right = np.array(self.leaf_right_mm, dtype=np.float64)
        if left.shape != right.shape:
            raise ValueError("left/right leaf arrays must have the same length")
        if np.any(left > right):
            pair = int(np.argmax(left > right))
            raise ValueError(f"leaf_left > leaf_right at pair {pair}")
        if self.mu_fraction < 0:
            raise ValueError(f"mu_fraction must be >= 0, got {self.mu_fraction}")
        left.flags.writeable = False
        right.flags.writeable = False
        object.__setattr__(self, "leaf_left_mm", left)
        object.__setattr__(self, "leaf_right_mm", right)


def interp_leaves(cp_a, cp_b, t: float) -> ApertureSample:
    """Linear leaf interpolation between two control points, t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return ApertureSample(
        leaf_left_mm=(1.0 - t) * cp_a.leaf_left_mm + t * cp_b.leaf_left_mm,
        leaf_right_mm=(1.0 - t) * cp_a.leaf_right_mm + t * cp_b.leaf_right_mm,
    )


def aperture_coverage(sample: ApertureSample, machine: MachineModel,
                      geom: PlaneGeometry) -> np.ndarray:
    """Per-pixel open-area fraction in [0, 1], shape (nv, nu).

    Pixels outside every leaf band get 0.
    """
    du, dv = geom.spacing_mm
    u = geom.u_coords()
    v = geom.v_coords()
    edges = machine.leaf_boundaries_mm
    left = sample.leaf_left_mm[:, None]
    right = sample.leaf_right_mm[:, None]
    # (pairs, nu) and (pairs, nv) rectangle overlaps
    u_ov = np.clip(np.minimum(u + du / 2, right) - np.maximum(u - du / 2, left),
                   0.0, None)
    v_ov = np.clip(np.minimum(v + dv / 2, edges[1:, None])
                   - np.maximum(v - dv / 2, edges[:-1, None]), 0.0, None)
    return (v_ov.T @ u_ov) / (du * dv)


def _mu_interval(gantry: np.ndarray, i: int) -> tuple[float, float]:
    lo = gantry[0] if i == 0 else 0.5 * (gantry[i - 1] + gantry[i])
    hi = gantry[-1] if i == len(gantry) - 1 else 0.5 * (gantry[i] + gantry[i + 1])
    return float(lo), float(hi)


def _leaves_at_angle(plan: VmatPlan, gantry: np.ndarray, angle: float) -> ApertureSample:
    j = int(np.searchsorted(gantry, angle, side="right")) - 1
    j = min(max(j, 0), len(gantry) - 2) if len(gantry) > 1 else 0
    if len(gantry) == 1:
        cp = plan.control_points[0]
        return ApertureSample(cp.leaf_left_mm, cp.leaf_right_mm)
    span = gantry[j + 1] - gantry[j]
    t = (angle - gantry[j]) / span
    return interp_leaves(plan.control_points[j], plan.control_points[j + 1],
                         float(np.clip(t, 0.0, 1.0)))


def fluence_for_cp(plan: VmatPlan, i: int, geom: PlaneGeometry,
                   substeps: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Fluence map of control point i, shape (nv, nu), float64.

    Bounded by [T * mu_weight, mu_weight] everywhere, T the transmission.
    """
    if not 0 <= i < plan.n_cp:
        raise IndexError(f"control point index {i} out of range [0, {plan.n_cp})")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    gantry = plan.gantry_angles()
    lo, hi = _mu_interval(gantry, i)
    coverage = np.zeros((geom.size_px[1], geom.size_px[0]), dtype=np.float64)
    for s in range(substeps):
        angle = lo + (s + 0.5) * (hi - lo) / substeps
        sample = _leaves_at_angle(plan, gantry, angle)
        coverage += aperture_coverage(sample, plan.machine, geom)
    coverage /= substeps
    t = plan.machine.transmission
    return plan.control_points[i].mu_weight * (t + (1.0 - t) * coverage)


def fluence_stack(plan: VmatPlan, geom: PlaneGeometry,
                  substeps: int = DEFAULT_SUBSTEPS,
                  threads: int | None = None) -> PlaneStack:
    """All control-point fluence maps, ordered by increasing gantry angle."""
    planes = map_ordered(lambda i: fluence_for_cp(plan, i, geom, substeps),
                         plan.n_cp, threads)
    return PlaneStack(geom, np.stack(planes).astype(np.float32), PlaneKind.FLUENCE)
