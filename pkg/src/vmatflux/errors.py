"""Exception types shared across the package."""

from __future__ import annotations


class PlanValidationError(ValueError):
    """A plan violates a structural invariant.

    cp_index / leaf_pair identify the offending control point when the
    violation is localized; both are None for plan-level problems.
    """

    def __init__(self, message: str, cp_index: int | None = None,
                 leaf_pair: int | None = None):
        super().__init__(message)
        self.cp_index = cp_index
        self.leaf_pair = leaf_pair


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class ShapeError(ValueError):
    """Array shapes or grid/plane geometries are inconsistent."""
