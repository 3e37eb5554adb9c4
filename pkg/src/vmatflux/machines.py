"""Varian-style 60-pair MLC machine models.

Leaf geometry is expressed at the isocenter plane in mm. The v axis runs
across the leaf pairs (61 band edges for 60 pairs, symmetric about 0);
the u axis runs along leaf travel. Transmission is the fraction of
fluence leaking through closed leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TRANSMISSION = 0.015
DEFAULT_SAD_MM = 1000.0

# (pair count, leaf width mm) runs, listed in ascending v
_LEAF_WIDTH_RUNS = {
    "HD120": ((14, 5.0), (32, 2.5), (14, 5.0)),
    "M120": ((10, 10.0), (40, 5.0), (10, 10.0)),
}

MACHINE_NAMES = tuple(_LEAF_WIDTH_RUNS)


def leaf_boundaries(model: str) -> np.ndarray:
    """61 leaf-band edges in mm, strictly increasing, symmetric about 0."""
    try:
        runs = _LEAF_WIDTH_RUNS[model]
    except KeyError:
        raise ValueError(f"unknown machine model {model!r}, "
                         f"expected one of {MACHINE_NAMES}") from None
    widths = np.concatenate([np.full(count, width) for count, width in runs])
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    return edges - edges[-1] / 2.0


@dataclass(frozen=True)
class MachineModel:
    """One MLC model: leaf band edges plus closed-leaf transmission."""

    name: str
    transmission: float = DEFAULT_TRANSMISSION
    leaf_boundaries_mm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.transmission < 1.0:
            raise ValueError(f"transmission must be in [0, 1), got {self.transmission}")
        edges = leaf_boundaries(self.name)
        edges.flags.writeable = False
        object.__setattr__(self, "leaf_boundaries_mm", edges)

    @property
    def leaf_pair_count(self) -> int:
        return len(self.leaf_boundaries_mm) - 1
