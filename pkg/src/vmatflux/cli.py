"""Command-line front end for the fluence pipeline.

Subcommands cover the whole loop: `gen` writes synthetic datasets,
`fluence` and `bev` run the two projectors on single plans, `train`
fits a network on a dataset directory, `predict` applies a checkpoint,
and `eval` scores a predicted stack against its target.

Exit codes: 0 success, 2 usage or input problems (bad flags, missing
or malformed files, invalid plans), 3 state or shape mismatches (a
checkpoint that does not fit the requested config, stacks that cannot
be compared). Reports print as text by default; --json switches every
subcommand to a single machine-readable object on stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dose import DVH_HEADROOM, dvh, dvh_to_csv, forward_dose, mae_gy
from .bev import project_dose
from .errors import FormatError, PlanValidationError, ShapeError
from .fluence import fluence_stack
from .grids import load_grid, load_stack, save_stack
from .metrics import psnr, ssim
from .net import (
    NetConfig,
    curve_to_csv,
    load_checkpoint,
    predict_fluence,
    save_checkpoint,
    train,
)
from .plans import load_plan
from .synth import PRESETS, gen_dataset

ARCH_NAMES = {"mednext3d": "MedNeXt3D", "unet3d": "UNet3D", "unet2d": "UNet2D"}


@dataclass(frozen=True)
class RunConfig:
    """One resolved invocation: paths made absolute, threads decided."""

    subcommand: str
    paths: dict[str, Path]
    preset: str
    seed: int
    threads: int | None
    overrides: dict[str, float | int]
    json_out: bool


def _resolve_threads(flag: int | None) -> int | None:
    """--threads wins; VMATFLUX_THREADS is the fallback; None = all cores."""
    if flag is not None:
        value = flag
    else:
        env = os.environ.get("VMATFLUX_THREADS", "").strip()
        if not env:
            return None
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"VMATFLUX_THREADS is not an integer: {env!r}")
    if value < 1:
        raise ValueError(f"thread count must be at least 1, got {value}")
    return value


def _emit(args, payload: dict, text_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload))
    else:
        for line in text_lines:
            print(line)


def _shape_summary(planes: np.ndarray) -> str:
    return "×".join(str(n) for n in planes.shape)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmatflux",
        description="Fluence-map pipeline: generate, project, train, score.")
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="command")

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: VMATFLUX_THREADS or all cores)")
        p.add_argument("--json", action="store_true",
                       help="machine-readable report on stdout")

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("-n", "--n-plans", dest="n", type=int, required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="ci")
    common(p)

    p = sub.add_parser("fluence", help="rasterize a plan's fluence stack")
    p.add_argument("plan")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="ci")
    p.add_argument("--substeps", type=int, default=8,
                   help="trapezoid substeps per control-point interval")
    common(p)

    p = sub.add_parser("bev", help="project a dose grid into beam's-eye view")
    p.add_argument("plan")
    p.add_argument("dose")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="ci")
    p.add_argument("--step-mm", type=float, default=1.0,
                   help="ray sampling step")
    common(p)

    p = sub.add_parser("train", help="fit a network on a dataset directory")
    p.add_argument("data")
    p.add_argument("-o", "--out", required=True, help="checkpoint directory")
    p.add_argument("--arch", choices=sorted(ARCH_NAMES), default="mednext3d")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--split", choices=("train", "val", "all"),
                   default="train", help="which manifest split to fit on")
    common(p)

    p = sub.add_parser("predict", help="apply a checkpoint to one plan + dose")
    p.add_argument("checkpoint")
    p.add_argument("plan")
    p.add_argument("dose")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--step-mm", type=float, default=1.0)
    common(p)

    p = sub.add_parser("eval", help="score a predicted stack against a target")
    p.add_argument("pred")
    p.add_argument("target")
    p.add_argument("-o", "--out", required=True, help="report directory")
    p.add_argument("--plan", default=None,
                   help="plan file; enables dose-space metrics")
    p.add_argument("--mask", action="append", default=[],
                   metavar="NAME=PATH",
                   help="structure mask for DVH output (repeatable)")
    common(p)

    return parser


def cmd_gen(args, threads) -> dict:
    manifest = gen_dataset(args.n, args.out, seed=args.seed,
                           preset=args.preset, threads=threads)
    path = str(Path(args.out) / "manifest.json")
    _emit(args, {"manifest": path, "ids": manifest["ids"],
                 "splits": manifest["splits"]},
          [path])
    return manifest


def cmd_fluence(args, threads) -> None:
    plan = load_plan(args.plan)
    geom = PRESETS[args.preset].plane_geometry()
    stack = fluence_stack(plan, geom, substeps=args.substeps, threads=threads)
    save_stack(stack, args.out)
    _emit(args, {"out": args.out, "shape": list(stack.planes.shape)},
          [_shape_summary(stack.planes)])


def cmd_bev(args, threads) -> None:
    plan = load_plan(args.plan)
    grid = load_grid(args.dose)
    geom = PRESETS[args.preset].plane_geometry()
    stack = project_dose(grid, plan, geom, step_mm=args.step_mm,
                         threads=threads)
    save_stack(stack, args.out)
    _emit(args, {"out": args.out, "shape": list(stack.planes.shape)},
          [_shape_summary(stack.planes)])


def _load_split(data_dir: Path, split: str, threads: int | None):
    """Training pairs for one manifest split: the network sees the dose
    re-projected into beam's-eye view, the same transform predict applies."""
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    if split == "all":
        ids = manifest["ids"]
    else:
        ids = manifest["splits"][split]
    if not ids:
        raise ValueError(f"split {split!r} is empty in {manifest_path}")
    pairs = []
    geometry = None
    for pid in ids:
        dose = load_grid(data_dir / "doses" / f"{pid}.vft")
        plan = load_plan(data_dir / "plans" / f"{pid}.json")
        fl = load_stack(data_dir / "fluences" / f"{pid}.vft")
        geometry = fl.geometry
        bev = project_dose(dose, plan, geometry, threads=threads)
        pairs.append((bev.planes, fl.planes))
    return manifest, ids, pairs, geometry


def cmd_train(args, threads) -> None:
    data_dir = Path(args.data)
    manifest, ids, pairs, geometry = _load_split(data_dir, args.split,
                                                 threads)
    arch = ARCH_NAMES[args.arch]
    n_cp = pairs[0][1].shape[0]
    lines = [f"training {arch} on {len(pairs)} plans from {data_dir}"]
    if arch == "UNet2D":
        config = NetConfig(arch=arch, base_channels=args.base_channels,
                           kernel=(1, 3, 3), in_channels=n_cp)
        lines.append(f"control points stacked as channels: "
                     f"channel count {n_cp}")
    else:
        config = NetConfig(arch=arch, base_channels=args.base_channels)
    result = train(pairs, config, steps=args.steps, lr=args.lr,
                   seed=args.seed)
    save_checkpoint(args.out, result.model, step=len(result.curve),
                    loss=result.final_loss, seed=args.seed,
                    denorm_scale=result.denorm_scale, geometry=geometry)
    curve_path = Path(args.out) / "curve.csv"
    curve_path.write_text(curve_to_csv(result.curve))
    lines += [f"final loss {result.final_loss:.6g}",
              f"checkpoint {args.out}",
              f"loss curve {curve_path}"]
    payload = {"checkpoint": str(args.out), "curve": str(curve_path),
               "arch": arch, "plans": ids, "steps": len(result.curve),
               "final_loss": result.final_loss,
               "denorm_scale": result.denorm_scale}
    if arch == "UNet2D":
        payload["channel_count"] = n_cp
    _emit(args, payload, lines)


def cmd_predict(args, threads) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    plan = load_plan(args.plan)
    dose = load_grid(args.dose)
    if ckpt.geometry is None:
        raise ShapeError(f"checkpoint {args.checkpoint} stores no plane "
                         "geometry; cannot size the output stack")
    stack = predict_fluence(ckpt.model, plan, dose, ckpt.geometry,
                            ckpt.denorm_scale, step_mm=args.step_mm,
                            threads=threads)
    save_stack(stack, args.out)
    _emit(args, {"out": args.out, "shape": list(stack.planes.shape)},
          [_shape_summary(stack.planes)])


def _parse_masks(specs: list[str]) -> list[tuple[str, str]]:
    masks = []
    for item in specs:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ValueError(f"--mask wants NAME=PATH, got {item!r}")
        masks.append((name, path))
    return masks


def _fmt_metric(value: float) -> str:
    return "inf" if np.isinf(value) else repr(float(value))


def cmd_eval(args, threads) -> None:
    pred = load_stack(args.pred)
    target = load_stack(args.target)
    masks = _parse_masks(args.mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    metrics: dict[str, float] = {
        "psnr_db": psnr(pred, target),
        "ssim": ssim(pred, target),
        "mae_fluence": float(np.abs(pred.planes.astype(np.float64)
                                    - target.planes.astype(np.float64)).mean()),
    }
    dvh_files = []
    if args.plan is not None and masks:
        plan = load_plan(args.plan)
        like = load_grid(masks[0][1])
        dose_pred = forward_dose(pred, plan, like=like, threads=threads)
        dose_target = forward_dose(target, plan, like=like, threads=threads)
        metrics["mae_gy"] = mae_gy(dose_pred, dose_target)
        d_max = DVH_HEADROOM * max(float(dose_pred.values.max()),
                                   float(dose_target.values.max()))
        for name, path in masks:
            mask = load_grid(path)
            for tag, dose in (("pred", dose_pred), ("target", dose_target)):
                curve = dvh(dose, mask, structure=name, d_max_gy=d_max)
                fp = out / f"dvh_{name}_{tag}.csv"
                fp.write_text(dvh_to_csv(curve))
                dvh_files.append(str(fp))
    elif args.plan is not None or masks:
        raise ValueError("dose-space metrics need both --plan and --mask")

    metrics_path = out / "metrics.csv"
    rows = ["metric,value"]
    rows += [f"{k},{_fmt_metric(v)}" for k, v in metrics.items()]
    metrics_path.write_text("\n".join(rows) + "\n")

    payload = {k: (_fmt_metric(v) if np.isinf(v) else float(v))
               for k, v in metrics.items()}
    payload["metrics_csv"] = str(metrics_path)
    if dvh_files:
        payload["dvh_csv"] = dvh_files
    _emit(args, payload,
          [f"{k} {_fmt_metric(v)}" for k, v in metrics.items()]
          + [f"metrics {metrics_path}"]
          + [f"dvh {fp}" for fp in dvh_files])


_DISPATCH = {
    "gen": cmd_gen,
    "fluence": cmd_fluence,
    "bev": cmd_bev,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def run_config_from_args(args, threads) -> RunConfig:
    path_keys = ("out", "plan", "dose", "data", "checkpoint", "pred",
                 "target")
    paths = {k: Path(v).resolve() for k in path_keys
             for v in [getattr(args, k, None)] if v is not None}
    overrides = {k: getattr(args, k) for k in
                 ("substeps", "step_mm", "lr", "steps", "base_channels")
                 if getattr(args, k, None) is not None}
    return RunConfig(subcommand=args.cmd, paths=paths,
                     preset=getattr(args, "preset", "ci"),
                     seed=args.seed, threads=threads,
                     overrides=overrides, json_out=args.json)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd == "gen" and args.n < 1:
            parser.error(f"-n must be at least 1, got {args.n}")
        threads = _resolve_threads(args.threads)
        run_config_from_args(args, threads)  # path resolution fails early
        _DISPATCH[args.cmd](args, threads)
    except SystemExit as exc:  # argparse --help (0) or usage error (2)
        return int(exc.code or 0)
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, PlanValidationError, ValueError,
            FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
