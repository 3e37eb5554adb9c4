import numpy as np
import pytest

from vmatflux import MachineModel, leaf_boundaries


def test_hd120_widths():
    edges = leaf_boundaries("HD120")
    widths = np.diff(edges)
    assert len(edges) == 61
    assert np.allclose(widths[:14], 5.0)
    assert np.allclose(widths[14:46], 2.5)
    assert np.allclose(widths[46:], 5.0)


def test_hd120_span():
    edges = leaf_boundaries("HD120")
    assert edges[0] == -110.0
    assert edges[-1] == 110.0
    assert np.isclose(np.diff(edges).sum(), 32 * 2.5 + 28 * 5.0)


def test_m120_widths_and_span():
    edges = leaf_boundaries("M120")
    widths = np.diff(edges)
    assert np.allclose(widths[:10], 10.0)
    assert np.allclose(widths[10:50], 5.0)
    assert np.allclose(widths[50:], 10.0)
    assert edges[0] == -200.0 and edges[-1] == 200.0


@pytest.mark.parametrize("name", ["HD120", "M120"])
def test_boundaries_symmetric_and_increasing(name):
    edges = leaf_boundaries(name)
    assert np.all(np.diff(edges) > 0)
    assert np.array_equal(edges, -edges[::-1])


def test_unknown_model():
    with pytest.raises(ValueError, match="unknown machine model"):
        leaf_boundaries("BrainLab")


def test_machine_model_fields():
    m = MachineModel("HD120")
    assert m.leaf_pair_count == 60
    assert m.transmission == 0.015
    assert not m.leaf_boundaries_mm.flags.writeable


@pytest.mark.parametrize("t", [-0.1, 1.0, 1.5])
def test_transmission_range(t):
    with pytest.raises(ValueError, match="transmission"):
        MachineModel("HD120", transmission=t)
