"""VMAT plan model and JSON plan files.

A plan is one arc: a machine model plus control points sorted by strictly
increasing gantry angle. mu_weight is the fraction of total MU attributed
to a control point's interval; leaf tips are u-positions in mm at the
isocenter plane, one left/right pair per leaf band.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PlanValidationError
from .machines import DEFAULT_SAD_MM, DEFAULT_TRANSMISSION, MachineModel

_CP_KEYS = ("gantry_deg", "collimator_deg", "couch_deg", "mu_weight",
            "leaf_left_mm", "leaf_right_mm")


@dataclass(frozen=True)
class ControlPoint:
    gantry_deg: float
    collimator_deg: float
    couch_deg: float
    mu_weight: float
    leaf_left_mm: np.ndarray
    leaf_right_mm: np.ndarray

    def __post_init__(self):
        left = np.array(self.leaf_left_mm, dtype=np.float64)
        right = np.array(self.leaf_right_mm, dtype=np.float64)
        left.flags.writeable = False
        right.flags.writeable = False
        object.__setattr__(self, "leaf_left_mm", left)
        object.__setattr__(self, "leaf_right_mm", right)


@dataclass(frozen=True)
class VmatPlan:
    machine: MachineModel
    isocenter_mm: tuple[float, float, float]
    sad_mm: float
    control_points: tuple[ControlPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "isocenter_mm",
                           tuple(float(c) for c in self.isocenter_mm))
        object.__setattr__(self, "control_points", tuple(self.control_points))
        _validate(self)

    @property
    def n_cp(self) -> int:
        return len(self.control_points)

    def gantry_angles(self) -> np.ndarray:
        return np.array([cp.gantry_deg for cp in self.control_points], dtype=np.float64)


def _validate(plan: VmatPlan) -> None:
    if plan.sad_mm <= 0:
        raise PlanValidationError(f"sad_mm must be positive, got {plan.sad_mm}")
    if not plan.control_points:
        raise PlanValidationError("plan has no control points")
    n_pairs = plan.machine.leaf_pair_count
    prev_gantry = None
    total_mu = 0.0
    for i, cp in enumerate(plan.control_points):
        if not 0.0 <= cp.gantry_deg < 360.0:
            raise PlanValidationError(
                f"CP {i}: gantry_deg {cp.gantry_deg} outside [0, 360)", cp_index=i)
        if prev_gantry is not None and cp.gantry_deg <= prev_gantry:
            raise PlanValidationError(
                f"CP {i}: gantry_deg {cp.gantry_deg} not greater than "
                f"previous {prev_gantry}", cp_index=i)
        prev_gantry = cp.gantry_deg
        if not np.isfinite(cp.mu_weight) or cp.mu_weight < 0:
            raise PlanValidationError(
                f"CP {i}: mu_weight must be finite and >= 0, got {cp.mu_weight}",
                cp_index=i)
        total_mu += cp.mu_weight
        for side, arr in (("leaf_left_mm", cp.leaf_left_mm),
                          ("leaf_right_mm", cp.leaf_right_mm)):
            if arr.shape != (n_pairs,):
                raise PlanValidationError(
                    f"CP {i}: {side} has {arr.shape} entries, expected {n_pairs}",
                    cp_index=i)
            if not np.all(np.isfinite(arr)):
                raise PlanValidationError(f"CP {i}: {side} has non-finite entries",
                                          cp_index=i)
        gaps = cp.leaf_left_mm > cp.leaf_right_mm
        if gaps.any():
            pair = int(np.argmax(gaps))
            raise PlanValidationError(
                f"CP {i}: leaf_left_mm > leaf_right_mm at pair {pair}",
                cp_index=i, leaf_pair=pair)
    if total_mu <= 0:
        raise PlanValidationError("plan delivers zero MU (sum of mu_weight is 0)")


def plan_to_dict(plan: VmatPlan) -> dict:
    return {
        "machine": plan.machine.name,
        "transmission": plan.machine.transmission,
        "sad_mm": plan.sad_mm,
        "isocenter_mm": list(plan.isocenter_mm),
        "control_points": [
            {
                "gantry_deg": cp.gantry_deg,
                "collimator_deg": cp.collimator_deg,
                "couch_deg": cp.couch_deg,
                "mu_weight": cp.mu_weight,
                "leaf_left_mm": cp.leaf_left_mm.tolist(),
                "leaf_right_mm": cp.leaf_right_mm.tolist(),
            }
            for cp in plan.control_points
        ],
    }


def plan_from_dict(data: dict) -> VmatPlan:
    for key in ("machine", "control_points"):
        if key not in data:
            raise PlanValidationError(f"plan is missing key {key!r}")
    machine = MachineModel(str(data["machine"]),
                           float(data.get("transmission", DEFAULT_TRANSMISSION)))
    cps = []
    for i, raw in enumerate(data["control_points"]):
        for key in _CP_KEYS:
            if key not in raw:
                raise PlanValidationError(f"CP {i}: missing key {key!r}", cp_index=i)
        cps.append(ControlPoint(
            gantry_deg=float(raw["gantry_deg"]),
            collimator_deg=float(raw["collimator_deg"]),
            couch_deg=float(raw["couch_deg"]),
            mu_weight=float(raw["mu_weight"]),
            leaf_left_mm=np.asarray(raw["leaf_left_mm"], dtype=np.float64),
            leaf_right_mm=np.asarray(raw["leaf_right_mm"], dtype=np.float64),
        ))
    return VmatPlan(
        machine=machine,
        isocenter_mm=tuple(data.get("isocenter_mm", (0.0, 0.0, 0.0))),
        sad_mm=float(data.get("sad_mm", DEFAULT_SAD_MM)),
        control_points=tuple(cps),
    )


def load_plan(path) -> VmatPlan:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PlanValidationError(f"{path}: malformed JSON ({exc})") from exc
    try:
        return plan_from_dict(data)
    except ValueError as exc:
        if isinstance(exc, PlanValidationError):
            raise
        raise PlanValidationError(f"{path}: {exc}") from exc


def save_plan(plan: VmatPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
