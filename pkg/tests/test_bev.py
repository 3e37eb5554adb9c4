"""Beam frame construction, trilinear sampling, and ray projection."""

import numpy as np
import pytest

from vmatflux import (Grid3, PlaneGeometry, PlaneKind, beam_frame, project_dose,
                      rotate_grid_about_gantry_axis, sample_trilinear)

from helpers import blob_grid, sphere_grid, uniform_plan
from oracles import trilinear_map_coordinates

GEOM33 = PlaneGeometry.centered(33, du=2.5)


def gaussian_ball(sigma_mm: float = 15.0, n: int = 48, spacing: float = 2.5) -> Grid3:
    origin = -(n - 1) / 2 * spacing
    xs = origin + spacing * np.arange(n)
    d2 = xs[None, None, :] ** 2 + xs[None, :, None] ** 2 + xs[:, None, None] ** 2
    vals = np.exp(-d2 / (2 * sigma_mm ** 2)).astype(np.float32)
    return Grid3(vals, (origin,) * 3, (spacing,) * 3)


def test_frame_gantry_zero():
    f = beam_frame(0.0, 0.0, 0.0, (0.0, 0.0, 0.0))
    assert np.allclose(f.source_mm, [0.0, -1000.0, 0.0])
    assert np.allclose(f.axis, [0.0, 1.0, 0.0])
    assert np.allclose(f.u_axis, [-1.0, 0.0, 0.0])
    assert np.allclose(f.v_axis, [0.0, 0.0, 1.0])


def test_frame_gantry_90():
    f = beam_frame(90.0, 0.0, 0.0, (0.0, 0.0, 0.0))
    assert np.allclose(f.source_mm, [1000.0, 0.0, 0.0])
    assert np.allclose(f.axis, [-1.0, 0.0, 0.0])
    assert np.allclose(f.u_axis, [0.0, -1.0, 0.0])


def test_frame_respects_isocenter_and_sad():
    f = beam_frame(0.0, 0.0, 0.0, (10.0, 20.0, -5.0), sad_mm=850.0)
    assert np.allclose(f.source_mm, [10.0, -830.0, -5.0])


def test_frame_collimator_spins_in_plane():
    f = beam_frame(0.0, 90.0, 0.0, (0.0, 0.0, 0.0))
    assert np.allclose(f.u_axis, [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(f.v_axis, [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(f.axis, [0.0, 1.0, 0.0])


def test_frame_couch_rotates_about_y():
    f = beam_frame(90.0, 0.0, 90.0, (0.0, 0.0, 0.0))
    assert np.allclose(f.source_mm, [0.0, 0.0, -1000.0], atol=1e-9)
    assert np.allclose(f.axis, [0.0, 0.0, 1.0], atol=1e-12)


def test_frame_right_handed_orthonormal():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g, c, t = rng.uniform(0.0, 360.0, 3)
        f = beam_frame(g, c, t, (0.0, 0.0, 0.0))
        for v in (f.axis, f.u_axis, f.v_axis):
            assert np.isclose(np.linalg.norm(v), 1.0)
        assert abs(f.u_axis @ f.v_axis) < 1e-12
        assert abs(f.u_axis @ f.axis) < 1e-12
        assert abs(f.v_axis @ f.axis) < 1e-12
        assert np.allclose(np.cross(f.u_axis, f.v_axis), f.axis, atol=1e-12)


def test_frame_rejects_bad_sad():
    with pytest.raises(ValueError, match="sad_mm"):
        beam_frame(0.0, 0.0, 0.0, (0.0, 0.0, 0.0), sad_mm=0.0)


def test_trilinear_matches_scipy_inside_and_out():
    rng = np.random.default_rng(11)
    vals = rng.random((9, 8, 7)).astype(np.float32)
    grid = Grid3(vals, (-6.0, -14.0, -8.0), (2.0, 4.0, 2.0))
    pts = rng.uniform(-40.0, 40.0, size=(500, 3))
    assert np.allclose(sample_trilinear(grid, pts),
                       trilinear_map_coordinates(grid, pts), atol=1e-6)


def test_trilinear_exact_at_voxel_centers():
    grid = sphere_grid(n=16)
    xs, ys, zs = grid.axis_coords()
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    want = grid.values.transpose(2, 1, 0).ravel()
    assert np.array_equal(sample_trilinear(grid, pts), want)


def test_trilinear_zero_far_outside():
    grid = sphere_grid(n=16)
    pts = np.array([[500.0, 0.0, 0.0], [0.0, -500.0, 0.0], [0.0, 0.0, 999.0]])
    assert not sample_trilinear(grid, pts).any()


def test_project_zero_grid():
    grid = Grid3.zeros((16, 16, 16), (-18.75, -18.75, -18.75), (2.5, 2.5, 2.5))
    stack = project_dose(grid, uniform_plan(n_cp=4), GEOM33)
    assert stack.n_cp == 4
    assert stack.kind is PlaneKind.BEV_DOSE
    assert not stack.planes.any()


def test_single_voxel_peaks_at_center_pixel():
    n = 17
    origin = -(n - 1) / 2 * 2.5
    vals = np.zeros((n, n, n), dtype=np.float32)
    vals[8, 8, 8] = 1.0  # voxel center exactly at the isocenter
    grid = Grid3(vals, (origin,) * 3, (2.5,) * 3)
    plane = project_dose(grid, uniform_plan(n_cp=1), GEOM33, step_mm=0.5).planes[0]
    assert plane[16, 16] == plane.max() > 0.0


def test_rod_along_z_lights_one_u_column():
    n = 17
    origin = -(n - 1) / 2 * 2.5
    vals = np.zeros((n, n, n), dtype=np.float32)
    vals[:, 8, 8] = 1.0
    grid = Grid3(vals, (origin,) * 3, (2.5,) * 3)
    plane = project_dose(grid, uniform_plan(n_cp=3), GEOM33, step_mm=0.5).planes[1]
    # only rows inside the rod's shadow see it
    assert np.all(plane[9:24].argmax(axis=1) == 16)
    assert not plane[:8].any() and not plane[25:].any()


def test_rod_along_x_lights_one_v_row():
    n = 17
    origin = -(n - 1) / 2 * 2.5
    vals = np.zeros((n, n, n), dtype=np.float32)
    vals[8, 8, :] = 1.0
    grid = Grid3(vals, (origin,) * 3, (2.5,) * 3)
    plane = project_dose(grid, uniform_plan(n_cp=1), GEOM33, step_mm=0.5).planes[0]
    # only columns inside the rod's shadow see it
    assert np.all(plane[:, 12:21].argmax(axis=0) == 16)


def test_central_chord_matches_sphere_diameter():
    plane = project_dose(sphere_grid(), uniform_plan(n_cp=1), GEOM33,
                         step_mm=0.5).planes[0]
    assert abs(plane[16, 16] - 50.0) <= 1.0  # 2% of the diameter


def test_projection_is_linear_in_the_grid():
    rng = np.random.default_rng(5)
    a, b = blob_grid(rng), blob_grid(rng)
    plan = uniform_plan(n_cp=4)
    combo = Grid3(2.0 * a.values + 3.0 * b.values, a.origin_mm, a.spacing_mm)
    pa = project_dose(a, plan, GEOM33).planes
    pb = project_dose(b, plan, GEOM33).planes
    pc = project_dose(combo, plan, GEOM33).planes
    assert np.allclose(pc, 2.0 * pa + 3.0 * pb, rtol=1e-5, atol=1e-3)


def test_rotating_grid_rolls_the_stack():
    rng = np.random.default_rng(7)
    grid = blob_grid(rng)
    plan = uniform_plan(n_cp=8)
    base = project_dose(grid, plan, GEOM33).planes
    # 45 deg needs off-lattice resampling; 90 deg permutes voxels exactly
    for k, tol in ((1, 0.05), (2, 1e-6)):
        rot = rotate_grid_about_gantry_axis(grid, k * 45.0)
        got = project_dose(rot, plan, GEOM33).planes
        want = np.roll(base, k, axis=0)
        assert np.linalg.norm(got - want) <= tol * np.linalg.norm(base)


def test_sphere_looks_alike_from_every_angle():
    ps = project_dose(sphere_grid(), uniform_plan(n_cp=8), GEOM33,
                      step_mm=0.5).planes
    for i in range(1, 8):
        rel = np.linalg.norm(ps[i] - ps[0]) / np.linalg.norm(ps[0])
        assert rel < 0.08  # hard-edged ball aliases at the rim


def test_smooth_ball_nearly_identical_across_angles():
    ps = project_dose(gaussian_ball(), uniform_plan(n_cp=8), GEOM33,
                      step_mm=0.5).planes
    peak = ps.max()
    for i in range(1, 8):
        assert np.abs(ps[i] - ps[0]).max() < 5e-3 * peak


def test_rotate_zero_is_identity():
    grid = sphere_grid()
    assert np.array_equal(rotate_grid_about_gantry_axis(grid, 0.0).values,
                          grid.values)


def test_rotate_full_turn_is_identity():
    rng = np.random.default_rng(9)
    grid = blob_grid(rng)
    back = rotate_grid_about_gantry_axis(grid, 360.0)
    assert np.allclose(back.values, grid.values, atol=1e-4)


def test_grid_and_isocenter_translate_together():
    rng = np.random.default_rng(13)
    grid = blob_grid(rng)
    shifted = Grid3(grid.values,
                    (grid.origin_mm[0] + 40.0, grid.origin_mm[1] - 15.0,
                     grid.origin_mm[2] + 5.0),
                    grid.spacing_mm)
    p0 = project_dose(grid, uniform_plan(n_cp=4), GEOM33).planes
    p1 = project_dose(shifted, uniform_plan(n_cp=4, iso=(40.0, -15.0, 5.0)),
                      GEOM33).planes
    assert np.allclose(p0, p1, rtol=1e-4, atol=1e-4)


def test_source_inside_grid_is_rejected():
    big = sphere_grid(n=48, spacing=50.0)  # spans well past the source
    with pytest.raises(ValueError, match="inside"):
        project_dose(big, uniform_plan(n_cp=2), GEOM33)


def test_halving_the_step_barely_moves_the_result():
    rng = np.random.default_rng(21)
    grid = blob_grid(rng)
    plan = uniform_plan(n_cp=4)
    p1 = project_dose(grid, plan, GEOM33, step_mm=1.0).planes
    p05 = project_dose(grid, plan, GEOM33, step_mm=0.5).planes
    assert np.linalg.norm(p1 - p05) <= 0.01 * np.linalg.norm(p05)


def test_rejects_nonpositive_step():
    with pytest.raises(ValueError, match="step_mm"):
        project_dose(sphere_grid(n=8), uniform_plan(n_cp=1), GEOM33, step_mm=0.0)


def test_thread_count_does_not_change_results():
    rng = np.random.default_rng(2)
    grid = blob_grid(rng)
    plan = uniform_plan(n_cp=6)
    a = project_dose(grid, plan, GEOM33, threads=1).planes
    b = project_dose(grid, plan, GEOM33, threads=4).planes
    assert np.array_equal(a, b)


def test_negative_grid_values_are_allowed():
    grid = sphere_grid(value=-2.0)
    stack = project_dose(grid, uniform_plan(n_cp=1), GEOM33)
    assert stack.planes.min() < 0.0
