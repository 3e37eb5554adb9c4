"""Shared plan/grid factories for the test suite."""

from __future__ import annotations

import numpy as np

from vmatflux import ControlPoint, Grid3, MachineModel, VmatPlan


def arc_angles(n_cp: int) -> np.ndarray:
    return np.arange(n_cp) * (360.0 / n_cp)


def uniform_plan(n_cp: int = 8, machine: str = "HD120", left: float = -50.0,
                 right: float = 50.0, mu: float | None = None,
                 collimator_deg: float = 0.0, couch_deg: float = 0.0,
                 transmission: float = 0.015, iso=(0.0, 0.0, 0.0),
                 sad: float = 1000.0) -> VmatPlan:
    """Arc with identical apertures at every control point."""
    m = MachineModel(machine, transmission)
    n_pairs = m.leaf_pair_count
    mu = 1.0 / n_cp if mu is None else mu
    cps = [
        ControlPoint(
            gantry_deg=float(g), collimator_deg=collimator_deg, couch_deg=couch_deg,
            mu_weight=mu,
            leaf_left_mm=np.full(n_pairs, left),
            leaf_right_mm=np.full(n_pairs, right),
        )
        for g in arc_angles(n_cp)
    ]
    return VmatPlan(m, iso, sad, tuple(cps))


def random_plan(rng: np.random.Generator, n_cp: int = 8, machine: str = "HD120",
                transmission: float = 0.015) -> VmatPlan:
    """Arc with random feasible apertures and positive MU weights."""
    m = MachineModel(machine, transmission)
    n_pairs = m.leaf_pair_count
    span = abs(m.leaf_boundaries_mm[0])
    cps = []
    for g in arc_angles(n_cp):
        center = rng.uniform(-span / 3, span / 3, n_pairs)
        width = rng.uniform(0.0, span / 2, n_pairs)
        mu = float(rng.uniform(0.2, 1.0))
        cps.append(ControlPoint(
            gantry_deg=float(g), collimator_deg=0.0, couch_deg=0.0, mu_weight=mu,
            leaf_left_mm=center - width / 2,
            leaf_right_mm=center + width / 2,
        ))
    return VmatPlan(m, (0.0, 0.0, 0.0), 1000.0, tuple(cps))


def blob_grid(rng: np.random.Generator, n: int = 48, spacing: float = 2.5,
              n_blobs: int = 4) -> Grid3:
    """Cube grid holding a smooth sum of random Gaussian bumps."""
    origin = -(n - 1) / 2.0 * spacing
    half = (n - 1) / 2.0 * spacing
    xs = origin + spacing * np.arange(n)
    field = np.zeros((n, n, n))
    for _ in range(n_blobs):
        cx, cy, cz = rng.uniform(-half / 2, half / 2, 3)
        sigma = rng.uniform(8.0, 16.0)
        amp = rng.uniform(0.5, 1.5)
        d2 = ((xs[None, None, :] - cx) ** 2
              + (xs[None, :, None] - cy) ** 2
              + (xs[:, None, None] - cz) ** 2)
        field += amp * np.exp(-d2 / (2 * sigma ** 2))
    return Grid3(field.astype(np.float32),
                 (origin, origin, origin), (spacing, spacing, spacing))


def sphere_grid(n: int = 48, spacing: float = 2.5, radius_mm: float = 25.0,
                center=(0.0, 0.0, 0.0), value: float = 1.0) -> Grid3:
    """Cube grid centered on the origin holding a uniform ball."""
    origin = -(n - 1) / 2.0 * spacing
    grid = Grid3.zeros((n, n, n), (origin, origin, origin), (spacing, spacing, spacing))
    xs, ys, zs = grid.axis_coords()
    dist2 = ((xs[None, None, :] - center[0]) ** 2
             + (ys[None, :, None] - center[1]) ** 2
             + (zs[:, None, None] - center[2]) ** 2)
    values = np.where(dist2 <= radius_mm ** 2, np.float32(value), np.float32(0.0))
    return Grid3(values, grid.origin_mm, grid.spacing_mm)


def randomize_params(layer, rng, scale=0.5):
    """Move every parameter to O(scale) so FD probes are well conditioned.

    At the 0.02 init scale the pre-norm activations are tiny and the
    norm's small sigma gives the loss a large third derivative, so a
    central difference at eps 1e-4 is truncation-dominated; O(1) values
    at the probe point keep it near roundoff.
    """
    for _, p in layer.named_params():
        p[...] = rng.normal(0.0, scale, p.shape)
