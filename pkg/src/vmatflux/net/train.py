"""Training loop, checkpoints, and the end-to-end prediction helper.

Everything here is deliberately plain: Adam with bias correction, batch
size 1 by default, a seeded per-epoch shuffle, and a loss curve recorded
as python floats so reruns with the same seed are bitwise comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bev import project_dose
from ..errors import FormatError, ShapeError
from ..grids import PlaneGeometry, PlaneKind, PlaneStack, load_tensor, save_tensor
from ..metrics import psnr_arrays
from .layers import (
    Layer,
    circular_pad_gantry,
    circular_pad_gantry_backward,
    crop_gantry,
    crop_gantry_backward,
    nan_check_mode,
)
from .models import NetConfig, build_model

MANIFEST_NAME = "manifest.json"
CHECKPOINT_FORMAT = "vmatflux-checkpoint-1"


def loss_l1l2(pred: np.ndarray, target: np.ndarray, alpha: float = 1.0,
              beta: float = 1.0) -> tuple[float, np.ndarray]:
    """alpha * mean|d| + beta * mean d^2, with its gradient in pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target {target.shape}")
    d = pred - target
    loss = alpha * float(np.abs(d).mean()) + beta * float((d * d).mean())
    grad = (alpha * np.sign(d) + (2.0 * beta) * d) / d.size
    return loss, grad.astype(pred.dtype, copy=False)


class Adam:
    """Adam over a live parameter dict; updates arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def _planes(obj) -> np.ndarray:
    return obj.planes if hasattr(obj, "planes") else np.asarray(obj)


def _pack(arr: np.ndarray, arch: str) -> np.ndarray:
    # (n_cp, nv, nu) -> 5D; the 2D baseline folds angles into channels
    return arr[None, :, None] if arch == "UNet2D" else arr[None, None]


def _unpack(tensor: np.ndarray, arch: str) -> np.ndarray:
    return tensor[0, :, 0] if arch == "UNet2D" else tensor[0, 0]


def _padded_depth(depth: int, multiple: int) -> int:
    target = -(-depth // multiple) * multiple
    if (target - depth) % 2:
        raise ShapeError(f"depth {depth} cannot be padded evenly to a "
                         f"multiple of {multiple}")
    return target


def _batch_psnr(pred: np.ndarray, target: np.ndarray) -> float:
    if float(target.max()) <= 0.0:
        return float("-inf")
    return psnr_arrays(pred, target)


@dataclass
class TrainResult:
    model: Layer
    config: NetConfig
    curve: list[tuple[int, float, float]] = field(repr=False)
    denorm_scale: float = 1.0
    seed: int = 0
    final_loss: float = float("nan")


def train(pairs, config: NetConfig, steps: int, lr: float = 1e-4,
          batch_size: int = 1, seed: int = 0, loss_alpha: float = 1.0,
          loss_beta: float = 1.0, psnr_stop: float | None = None,
          dtype=np.float32) -> TrainResult:
    """Fit a fresh model to (input stack, target stack) pairs.

    Inputs and targets are each scaled by their own maximum, so the net
    learns a scale-free map. The median ratio of target to input maxima
    is carried as denorm_scale; prediction multiplies the output by that
    ratio times the new input's own maximum, which tracks plan intensity
    because dose is linear in fluence. The curve rows are (step, loss,
    psnr) with the loss measured before that step's update.
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    if not pairs:
        raise ValueError("no training pairs")
    inputs = [np.asarray(_planes(a), dtype) for a, _ in pairs]
    targets = [np.asarray(_planes(b), dtype) for _, b in pairs]
    shape = inputs[0].shape
    for i, (a, b) in enumerate(zip(inputs, targets)):
        if a.ndim != 3 or a.shape != shape or b.shape != shape:
            raise ShapeError(f"pair {i}: shapes {a.shape}/{b.shape} do not "
                             f"all match {shape}")
    if config.arch == "UNet2D" and config.in_channels != shape[0]:
        raise ShapeError(f"UNet2D in_channels={config.in_channels} must "
                         f"equal the {shape[0]} planes per stack")

    tiny = np.finfo(np.float64).tiny
    t_maxima = np.array([float(t.max()) for t in targets])
    if float(np.median(t_maxima)) <= 0.0:
        raise ValueError("training targets are all zero; nothing to fit")
    ratios = t_maxima / np.array([max(float(x.max()), tiny) for x in inputs])
    denorm_scale = float(np.median(ratios))
    inputs = [x / max(float(x.max()), tiny) for x in inputs]
    targets = [t / max(float(t.max()), tiny) for t in targets]

    depth = shape[0]
    pad_to = (_padded_depth(depth, config.pad_multiple)
              if config.arch != "UNet2D" else depth)

    model = build_model(config, seed=seed, dtype=dtype)
    opt = Adam(dict(model.named_params()), lr=lr)
    shuffle_rng = np.random.default_rng((seed, 1))
    if config.check_finite:
        nan_check_mode(True)
    try:
        curve: list[tuple[int, float, float]] = []
        order: list[int] = []
        loss = float("nan")
        for step in range(1, steps + 1):
            if len(order) < batch_size:
                order += list(shuffle_rng.permutation(len(pairs)))
            batch = order[:batch_size]
            order = order[batch_size:]
            x = np.concatenate([_pack(inputs[i], config.arch) for i in batch])
            t = np.concatenate([_pack(targets[i], config.arch) for i in batch])
            if config.arch != "UNet2D":
                xin = circular_pad_gantry(x, pad_to)
                pred = crop_gantry(model.forward(xin), depth)
            else:
                pred = model.forward(x)
            loss, grad = loss_l1l2(pred, t, loss_alpha, loss_beta)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {step}; "
                                   "lower the learning rate or check inputs")
            step_psnr = _batch_psnr(pred, t)
            curve.append((step, float(loss), float(step_psnr)))
            if psnr_stop is not None and step_psnr >= psnr_stop:
                break
            model.zero_grads()
            if config.arch != "UNet2D":
                g = crop_gantry_backward(grad, pad_to)
                g = model.backward(g)
            else:
                model.backward(grad)
            opt.step(dict(model.named_grads()))
    finally:
        if config.check_finite:
            nan_check_mode(False)
    return TrainResult(model=model, config=config, curve=curve,
                       denorm_scale=denorm_scale, seed=seed, final_loss=loss)


def curve_to_csv(curve) -> str:
    """Loss curve as CSV text; repr floats keep reruns bit-comparable."""
    lines = ["step,loss,psnr"]
    for step, loss, p in curve:
        lines.append(f"{step},{float(loss)!r},{float(p)!r}")
    return "\n".join(lines) + "\n"


def _geometry_to_dict(geometry: PlaneGeometry | None):
    if geometry is None:
        return None
    return {"size_px": list(geometry.size_px),
            "spacing_mm": list(geometry.spacing_mm),
            "origin_mm": list(geometry.origin_mm)}


def _geometry_from_dict(data) -> PlaneGeometry | None:
    if data is None:
        return None
    return PlaneGeometry(tuple(data["size_px"]), tuple(data["spacing_mm"]),
                         tuple(data["origin_mm"]))


def save_checkpoint(path, model: Layer, *, step: int, loss: float,
                    seed: int, denorm_scale: float,
                    geometry: PlaneGeometry | None = None) -> Path:
    """Write a checkpoint directory: manifest.json plus one file per array."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, value in model.named_params():
        save_tensor(value, path / "params" / f"{name}.vft")
        names.append(name)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "step": int(step),
        "loss": float(loss),
        "seed": int(seed),
        "denorm_scale": float(denorm_scale),
        "plane_geometry": _geometry_to_dict(geometry),
        "params": names,
    }
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


@dataclass
class LoadedCheckpoint:
    model: Layer
    config: NetConfig
    step: int
    loss: float
    seed: int
    denorm_scale: float
    geometry: PlaneGeometry | None


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild the model for a checkpoint directory and load its arrays."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest_path}: format "
                          f"{manifest.get('format')!r}, expected "
                          f"{CHECKPOINT_FORMAT!r}")
    config = NetConfig.from_dict(manifest["config"])
    model = build_model(config, seed=int(manifest.get("seed", 0)))
    expected = dict(model.named_params())
    stored = list(manifest["params"])
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise ShapeError(f"checkpoint parameters do not match the config: "
                         f"missing {missing}, unexpected {unexpected}")
    for name in stored:
        value = load_tensor(path / "params" / f"{name}.vft")
        if value.shape != expected[name].shape:
            raise ShapeError(f"parameter {name}: stored shape {value.shape} "
                             f"!= model shape {expected[name].shape}")
        expected[name][...] = value
    return LoadedCheckpoint(
        model=model, config=config, step=int(manifest["step"]),
        loss=float(manifest["loss"]), seed=int(manifest["seed"]),
        denorm_scale=float(manifest["denorm_scale"]),
        geometry=_geometry_from_dict(manifest.get("plane_geometry")))


def predict_fluence(model: Layer, plan, dose_grid, geometry: PlaneGeometry,
                    denorm_scale: float, step_mm: float = 1.0,
                    threads: int | None = None) -> PlaneStack:
    """Project the dose into BEV planes and map them to a fluence stack.

    Mirrors the training normalization: the input is scaled by its own
    maximum, the output by denorm_scale times that same maximum, and the
    result is clamped at zero.
    """
    config: NetConfig = model.config
    bev = project_dose(dose_grid, plan, geometry, step_mm=step_mm,
                       threads=threads)
    arr = bev.planes.astype(np.float32)
    if config.arch == "UNet2D" and config.in_channels != arr.shape[0]:
        raise ShapeError(f"UNet2D in_channels={config.in_channels} must "
                         f"equal the plan's {arr.shape[0]} control points")
    peak = float(arr.max())
    if peak > 0.0:
        arr = arr / peak
    x = _pack(arr, config.arch)
    if config.arch != "UNet2D":
        depth = arr.shape[0]
        x = circular_pad_gantry(x, _padded_depth(depth, config.pad_multiple))
        out = crop_gantry(model.forward(x), depth)
    else:
        out = model.forward(x)
    # an all-zero projection carries no scale; fall back to the ratio alone
    fluence = _unpack(out, config.arch) * denorm_scale * (peak or 1.0)
    fluence = np.maximum(fluence, 0.0).astype(np.float32)
    return PlaneStack(geometry, fluence, PlaneKind.FLUENCE)
