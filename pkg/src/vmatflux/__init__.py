"""VMAT fluence-map prediction pipeline at desk scale.

Fluence rasterization from MLC sequences, beam's-eye-view projection of
3D dose grids, a from-scratch 3D encoder-decoder network mapping BEV dose
stacks to fluence stacks, evaluation metrics, and a synthetic data
generator. See README.md for the CLI.
"""

from .bev import (BeamFrame, beam_frame, project_dose, rotate_grid_about_gantry_axis,
                  sample_trilinear)
from .dose import DvhCurve, dvh, dvh_to_csv, forward_dose, mae_gy, sample_bilinear
from .errors import FormatError, PlanValidationError, ShapeError
from .fluence import ApertureSample, aperture_coverage, fluence_for_cp, fluence_stack, interp_leaves
from .grids import (Grid3, PlaneGeometry, PlaneKind, PlaneStack, load_grid, load_stack,
                    load_tensor, save_grid, save_stack, save_tensor)
from .machines import MachineModel, leaf_boundaries
from .metrics import psnr, psnr_arrays, ssim
from .net import (NetConfig, TrainResult, build_model, circular_pad_gantry,
                  crop_gantry, curve_to_csv, load_checkpoint, loss_l1l2,
                  predict_fluence, save_checkpoint, train)
from .plans import ControlPoint, VmatPlan, load_plan, save_plan

__all__ = [
    "ApertureSample", "BeamFrame", "ControlPoint", "DvhCurve", "FormatError",
    "Grid3", "MachineModel", "NetConfig", "PlanValidationError", "PlaneGeometry",
    "PlaneKind", "PlaneStack", "ShapeError", "TrainResult", "VmatPlan",
    "aperture_coverage", "beam_frame", "build_model", "circular_pad_gantry",
    "crop_gantry", "curve_to_csv", "dvh", "dvh_to_csv", "fluence_for_cp",
    "fluence_stack", "forward_dose", "interp_leaves", "leaf_boundaries",
    "load_checkpoint", "load_grid", "load_plan", "load_stack", "load_tensor",
    "loss_l1l2", "mae_gy", "predict_fluence", "project_dose", "psnr",
    "psnr_arrays", "rotate_grid_about_gantry_axis", "sample_bilinear",
    "sample_trilinear", "save_checkpoint", "save_grid", "save_plan",
    "save_stack", "save_tensor", "ssim", "train",
]
