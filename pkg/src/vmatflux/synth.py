"""Synthetic (plan, dose, fluence) triples for training and ablations.

A phantom is an ellipsoidal target plus a few ellipsoidal avoidance
structures on a regular grid. Plans fit each control point's aperture
to the target's beam's-eye-view silhouette, widen it with a smooth
seeded modulation, and weight the control points with a smooth MU
profile, so the fluence stacks are plausible arcs rather than noise.
The input dose for each triple comes from this package's own forward
projector, which keeps fluence recovery well posed: the quantity the
network must undo is exactly the projection the pipeline computes.

Per-plan RNG streams are derived from (seed, plan index), so datasets
are byte-identical for a given seed no matter how generation is
batched or parallelized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bev import beam_frame
from .dose import forward_dose
from .fluence import fluence_stack
from .grids import Grid3, PlaneGeometry, save_grid, save_stack
from .machines import MachineModel
from .plans import ControlPoint, VmatPlan, save_plan

SILHOUETTE_MARGIN_MM = 3.0
DEFAULT_CONSTRAINTS = {"max_leaf_travel_mm_per_cp": 10.0}
# modulation scales chosen so every generated stack keeps Pearson r > 0.8
# against its own dose re-projection; stronger tip or MU swings push the
# per-control-point fluences too far from the arc-averaged dose image
MODULATION_AMP_MM = 6.0
MU_MODULATION = 0.2
# split rng stream id; per-plan streams use (seed, plan index), which stays
# far below this
_SPLIT_STREAM = 2 ** 20


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center_mm",
                           tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "radii_mm",
                           tuple(float(r) for r in self.radii_mm))
        if any(r <= 0 for r in self.radii_mm):
            raise ValueError(f"radii must be positive, got {self.radii_mm}")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry recipe for one phantom; seed drives the plan built on it."""

    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (2.5, 2.5, 2.5)
    target: Ellipsoid = field(
        default_factory=lambda: Ellipsoid((0, 0, 0), (25, 25, 25)))
    oars: tuple[Ellipsoid, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm",
                           tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "oars", tuple(self.oars))
        if any(d < 2 for d in self.dims):
            raise ValueError(f"dims must be at least 2, got {self.dims}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(
                f"spacings must be positive, got {self.spacing_mm}")
        half = [(d - 1) * s / 2.0 for d, s in zip(self.dims, self.spacing_mm)]
        for i in range(3):
            c, r = self.target.center_mm[i], self.target.radii_mm[i]
            if c - r < -half[i] or c + r > half[i]:
                raise ValueError(
                    f"target ellipsoid leaves the grid on axis {i}: "
                    f"center {c} radius {r} vs half-extent {half[i]}")

    def grid_origin_mm(self) -> tuple[float, float, float]:
        """Grid centered on the isocenter; origin is the first voxel center."""
        return tuple(-(d - 1) * s / 2.0
                     for d, s in zip(self.dims, self.spacing_mm))


def _ellipsoid_mask(spec: PhantomSpec, ell: Ellipsoid) -> np.ndarray:
    origin = spec.grid_origin_mm()
    ax = [origin[i] + np.arange(spec.dims[i]) * spec.spacing_mm[i]
          for i in range(3)]
    cx, cy, cz = ell.center_mm
    rx, ry, rz = ell.radii_mm
    # axes broadcast as (z, y, x) to match Grid3 storage
    fz = (((ax[2] - cz) / rz) ** 2)[:, None, None]
    fy = (((ax[1] - cy) / ry) ** 2)[None, :, None]
    fx = (((ax[0] - cx) / rx) ** 2)[None, None, :]
    return ((fz + fy + fx) <= 1.0).astype(np.float32)


def gen_phantom(spec: PhantomSpec) -> tuple[Grid3, list[Grid3]]:
    """Rasterize the spec's ellipsoids into binary masks."""
    origin = spec.grid_origin_mm()
    target = Grid3(_ellipsoid_mask(spec, spec.target), origin, spec.spacing_mm)
    oars = [Grid3(_ellipsoid_mask(spec, oar), origin, spec.spacing_mm)
            for oar in spec.oars]
    return target, oars


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int],
                  sigma: tuple[float, float]) -> np.ndarray:
    """Low-frequency noise scaled to peak 1; wraps along the first axis."""
    raw = ndimage.gaussian_filter(rng.normal(size=shape), sigma,
                                  mode=("wrap", "nearest"))
    peak = float(np.abs(raw).max())
    return raw / peak if peak > 0 else raw


def _silhouette_intervals(target: Grid3, frame, sad_mm: float,
                          edges: np.ndarray):
    """Per leaf row: [min u, max u] over the target's projected voxel
    centers, NaN where the row sees none, plus the median u for parking."""
    iz, iy, ix = np.nonzero(target.values > 0.5)
    ox, oy, oz = target.origin_mm
    sx, sy, sz = target.spacing_mm
    pts = np.stack([ox + ix * sx, oy + iy * sy, oz + iz * sz], axis=1)
    d = pts - frame.source_mm
    depth = d @ frame.axis
    u = sad_mm * (d @ frame.u_axis) / depth
    v = sad_mm * (d @ frame.v_axis) / depth
    n_pairs = len(edges) - 1
    lo = np.full(n_pairs, np.nan)
    hi = np.full(n_pairs, np.nan)
    rows = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_pairs - 1)
    for j in np.unique(rows):
        in_row = u[rows == j]
        lo[j] = in_row.min()
        hi[j] = in_row.max()
    return lo, hi, float(np.median(u))


def gen_plan(target: Grid3, machine: MachineModel, n_cp: int, seed: int,
             constraints: dict | None = None,
             isocenter_mm: tuple[float, float, float] = (0.0, 0.0, 0.0),
             sad_mm: float = 1000.0) -> VmatPlan:
    """Arc plan whose apertures track the target mask's silhouette.

    Control points sit at equal gantry spacing over the full circle.
    Each aperture is the per-row silhouette interval plus a margin,
    widened outward by a smooth seeded modulation; rows the target never
    shadows park closed at the silhouette's median. Leaf travel between
    consecutive control points is limited by walking each tip sequence
    forward and clipping its increments toward the request; the update
    is monotone in both its arguments, so left <= right survives, and
    tips that start outside the silhouette (they all do, the modulation
    only widens) stay outside while the request does.

    constraints keys: max_leaf_travel_mm_per_cp (default 10).
    """
    if n_cp < 8:
        raise ValueError(f"n_cp must be at least 8, got {n_cp}")
    cons = dict(DEFAULT_CONSTRAINTS)
    if constraints:
        unknown = set(constraints) - set(cons)
        if unknown:
            raise ValueError(f"unknown constraint keys: {sorted(unknown)}")
        cons.update(constraints)
    c = float(cons["max_leaf_travel_mm_per_cp"])
    if c < 0:
        raise ValueError(f"max_leaf_travel_mm_per_cp is infeasible: {c}")
    if not (target.values > 0.5).any():
        raise ValueError("target mask is empty")

    rng = np.random.default_rng(seed)
    edges = machine.leaf_boundaries_mm
    n_pairs = machine.leaf_pair_count
    gantry = 360.0 * np.arange(n_cp) / n_cp

    mod_left = MODULATION_AMP_MM * np.abs(
        _smooth_field(rng, (n_cp, n_pairs), (n_cp / 8.0, 6.0)))
    mod_right = MODULATION_AMP_MM * np.abs(
        _smooth_field(rng, (n_cp, n_pairs), (n_cp / 8.0, 6.0)))
    raw_left = np.empty((n_cp, n_pairs))
    raw_right = np.empty((n_cp, n_pairs))
    for i, g in enumerate(gantry):
        frame = beam_frame(g, 0.0, 0.0, isocenter_mm, sad_mm)
        lo, hi, park_u = _silhouette_intervals(target, frame, sad_mm, edges)
        closed = np.isnan(lo)
        raw_left[i] = np.where(
            closed, park_u, lo - SILHOUETTE_MARGIN_MM - mod_left[i])
        raw_right[i] = np.where(
            closed, park_u, hi + SILHOUETTE_MARGIN_MM + mod_right[i])

    left = raw_left.copy()
    right = raw_right.copy()
    for i in range(1, n_cp):
        left[i] = left[i - 1] + np.clip(raw_left[i] - left[i - 1], -c, c)
        right[i] = right[i - 1] + np.clip(raw_right[i] - right[i - 1], -c, c)

    mu = 1.0 + MU_MODULATION * _smooth_field(rng, (n_cp, 1),
                                             (n_cp / 8.0, 1.0))[:, 0]
    mu = np.clip(mu, 0.1, None)
    mu /= mu.sum()

    cps = tuple(
        ControlPoint(gantry_deg=float(gantry[i]), collimator_deg=0.0,
                     couch_deg=0.0, mu_weight=float(mu[i]),
                     leaf_left_mm=left[i], leaf_right_mm=right[i])
        for i in range(n_cp))
    return VmatPlan(machine=machine, isocenter_mm=isocenter_mm,
                    sad_mm=sad_mm, control_points=cps)


@dataclass(frozen=True)
class Preset:
    name: str
    n_cp: int
    plane_px: int
    plane_spacing_mm: float
    grid_dims: tuple[int, int, int]
    grid_spacing_mm: float
    # target sizing is calibrated per preset: the fluence/dose correlation
    # floor depends on how much of the plane the apertures sweep, which
    # changes with plane extent and control point count
    radius_range_mm: tuple[float, float] = (20.0, 28.0)
    radius_jitter: tuple[float, float] = (0.88, 1.12)

    def plane_geometry(self) -> PlaneGeometry:
        return PlaneGeometry.centered(self.plane_px, du=self.plane_spacing_mm)


PRESETS = {
    "ci": Preset("ci", n_cp=32, plane_px=32, plane_spacing_mm=2.5,
                 grid_dims=(48, 48, 48), grid_spacing_mm=2.5),
    "paper-shape": Preset("paper-shape", n_cp=180, plane_px=64,
                          plane_spacing_mm=1.5, grid_dims=(96, 96, 96),
                          grid_spacing_mm=2.0,
                          radius_range_mm=(26.0, 32.0),
                          radius_jitter=(0.94, 1.06)),
}


def random_phantom_spec(rng: np.random.Generator, preset: Preset) -> PhantomSpec:
    """Offset, resized target plus 1..3 avoidance ellipsoids to the sides.

    Target radii are a common base scaled by a mild per-axis jitter:
    strongly anisotropic targets swing the aperture across the arc while
    the dose image stays arc-averaged, which drags the fluence/dose
    correlation below useful levels. Draws the plan seed from the same
    stream so one generator call fully determines the triple.
    """
    center = rng.uniform(-10.0, 10.0, 3)
    radii = (rng.uniform(*preset.radius_range_mm)
             * rng.uniform(*preset.radius_jitter, 3))
    oars = []
    for _ in range(int(rng.integers(1, 4))):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        oar_center = center + direction * (radii.max() + rng.uniform(8, 16))
        oars.append(Ellipsoid(tuple(oar_center),
                              tuple(rng.uniform(6.0, 14.0, 3))))
    return PhantomSpec(dims=preset.grid_dims,
                       spacing_mm=(preset.grid_spacing_mm,) * 3,
                       target=Ellipsoid(tuple(center), tuple(radii)),
                       oars=tuple(oars),
                       seed=int(rng.integers(0, 2 ** 62)))


def gen_one(index: int, seed: int, preset: Preset,
            machine: MachineModel | None = None,
            substeps: int = 8, threads: int | None = None):
    """Build triple number `index`: (spec, plan, fluence, dose, target mask)."""
    machine = machine or MachineModel("HD120")
    rng = np.random.default_rng((seed, index))
    spec = random_phantom_spec(rng, preset)
    target, _ = gen_phantom(spec)
    plan = gen_plan(target, machine, preset.n_cp, seed=spec.seed)
    fl = fluence_stack(plan, preset.plane_geometry(), substeps=substeps,
                       threads=threads)
    dose = forward_dose(fl, plan, like=target, threads=threads)
    return spec, plan, fl, dose, target


def gen_dataset(n_plans: int, out_dir, seed: int, preset: str = "ci",
                threads: int | None = None) -> dict:
    """Write n_plans triples plus manifest.json; returns the manifest.

    Layout: plans/<id>.json, doses/<id>.vft, fluences/<id>.vft, plus
    masks/<id>.vft (the target mask, so evaluation can bin dose-volume
    histograms without regenerating phantoms). The train/val split is a
    seeded permutation cut at 90%.
    """
    if n_plans < 1:
        raise ValueError(f"n_plans must be at least 1, got {n_plans}")
    if preset not in PRESETS:
        raise ValueError(
            f"unknown preset {preset!r}; pick from {sorted(PRESETS)}")
    out = Path(out_dir)
    for sub in ("plans", "doses", "fluences", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = [f"plan{idx:04d}" for idx in range(n_plans)]
    for idx, plan_id in enumerate(ids):
        _, plan, fl, dose, target = gen_one(idx, seed, PRESETS[preset],
                                            threads=threads)
        save_plan(plan, out / "plans" / f"{plan_id}.json")
        save_stack(fl, out / "fluences" / f"{plan_id}.vft")
        save_grid(dose, out / "doses" / f"{plan_id}.vft", kind="dose")
        save_grid(target, out / "masks" / f"{plan_id}.vft", kind="mask")
    order = np.random.default_rng((seed, _SPLIT_STREAM)).permutation(n_plans)
    n_train = int(0.9 * n_plans)
    manifest = {
        "seed": int(seed),
        "preset": preset,
        "ids": ids,
        "splits": {
            "train": sorted(ids[i] for i in order[:n_train]),
            "val": sorted(ids[i] for i in order[n_train:]),
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest
