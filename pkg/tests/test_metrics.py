"""PSNR and SSIM on plane stacks."""

import numpy as np
import pytest

from vmatflux import PlaneGeometry, PlaneKind, PlaneStack, ShapeError, psnr, ssim

from oracles import ssim_direct

GEOM = PlaneGeometry.centered(33, du=2.5)


def stack(arr: np.ndarray) -> PlaneStack:
    return PlaneStack(GEOM, arr.astype(np.float32), PlaneKind.FLUENCE)


def random_stack(rng: np.random.Generator, n_cp: int = 3) -> PlaneStack:
    return stack(rng.random((n_cp, 33, 33)))


def test_psnr_identity_is_inf():
    t = random_stack(np.random.default_rng(0))
    assert psnr(t, t) == float("inf")


def test_psnr_tenth_peak_shift_is_twenty_db():
    t = random_stack(np.random.default_rng(1))
    peak = float(t.planes.max())
    p = stack(t.planes + np.float32(0.1 * peak))
    assert abs(psnr(p, t) - 20.0) < 1e-5


def test_psnr_shape_mismatch():
    t = random_stack(np.random.default_rng(2))
    p = random_stack(np.random.default_rng(2), n_cp=4)
    with pytest.raises(ShapeError):
        psnr(p, t)


def test_psnr_all_zero_target():
    z = stack(np.zeros((2, 33, 33)))
    with pytest.raises(ValueError, match="all zero"):
        psnr(z, z)


def test_ssim_identity_is_one():
    t = random_stack(np.random.default_rng(3))
    assert abs(ssim(t, t) - 1.0) < 1e-12


def test_ssim_inverted_binary_is_near_floor():
    rng = np.random.default_rng(4)
    b = (rng.random((3, 33, 33)) > 0.5).astype(np.float32)
    assert ssim(stack(1.0 - b), stack(b)) < 0.05


def test_ssim_matches_direct_window_loop():
    rng = np.random.default_rng(5)
    p, t = random_stack(rng), random_stack(rng)
    data_range = float(t.planes.max())
    want = np.mean([ssim_direct(p.planes[i], t.planes[i], data_range)
                    for i in range(3)])
    assert abs(ssim(p, t) - want) < 1e-9


def test_degradation_ladder_orders_both_metrics():
    rng = np.random.default_rng(6)
    t = random_stack(rng)
    noise = rng.normal(size=t.planes.shape)
    psnrs, ssims = [], []
    for amp in (0.02, 0.05, 0.1, 0.2):
        p = stack(np.abs(t.planes + amp * noise))
        psnrs.append(psnr(p, t))
        ssims.append(ssim(p, t))
    assert all(a > b for a, b in zip(psnrs, psnrs[1:]))
    assert all(a > b for a, b in zip(ssims, ssims[1:]))


def test_constant_shift_drops_ssim_below_one():
    t = random_stack(np.random.default_rng(7))
    p = stack(t.planes + np.float32(0.25))
    assert ssim(p, t) < 1.0


def test_single_element_change_breaks_both_identities():
    t = random_stack(np.random.default_rng(8))
    bumped = t.planes.copy()
    bumped[1, 16, 16] += 0.5
    p = stack(bumped)
    assert np.isfinite(psnr(p, t))
    assert ssim(p, t) < 1.0


def test_ssim_shape_mismatch_and_zero_target():
    t = random_stack(np.random.default_rng(9))
    with pytest.raises(ShapeError):
        ssim(random_stack(np.random.default_rng(9), n_cp=2), t)
    z = stack(np.zeros((2, 33, 33)))
    with pytest.raises(ValueError, match="all zero"):
        ssim(z, z)


def test_ssim_rejects_slices_smaller_than_window():
    geom = PlaneGeometry.centered(5, du=2.5)
    tiny = PlaneStack(geom, np.ones((1, 5, 5), np.float32), PlaneKind.FLUENCE)
    with pytest.raises(ShapeError, match="window"):
        ssim(tiny, tiny)
