"""Command-line surface: register, evaluate, pairwise, phantom, plots.

Every numeric default equals the reference configuration (learning rate
0.01, loss weights 1e-3 / 1e-2, NCC window 5, inference scale 0.5, 3
downscales, 32 base channels, stopping parameters 100 / 0.0007 / 200).
Errors print one machine-parsable ``ERROR: ...`` line on stderr and exit
with code 2. Seeds are recorded in every report written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import dataio, evaluate as ev
from .core import Grid3, ImageGroup, LandmarkSet, Volume, ZERO_BASED
from .fields import InversionParams, pairwise_field, warp
from .losses import LossWeights
from .network import NetConfig
from .optimize import RegConfig, implicit_template, register, resume, write_trace


def _add_reg_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("registration")
    g.add_argument("--learning-rate", type=float, default=0.01)
    g.add_argument("--lambda0", type=float, default=1e-3,
                   help="smoothness weight")
    g.add_argument("--lambda1", type=float, default=1e-2,
                   help="cyclic weight")
    g.add_argument("--ncc-window", type=int, default=5)
    g.add_argument("--num-downscales", type=int, default=3)
    g.add_argument("--base-channels", type=int, default=32)
    g.add_argument("--inference-scale", type=float, default=0.5)
    g.add_argument("--n-stop", type=int, default=100,
                   help="similarity window length for the stopping rule")
    g.add_argument("--sigma-stop", type=float, default=0.0007)
    g.add_argument("--n-iter-min", type=int, default=200)
    g.add_argument("--max-iters", type=int, default=3000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-cyclic", action="store_true",
                   help="drop the cyclic term (non-periodic motion)")
    g.add_argument("--device", default="cpu")


def _reg_config(args, num_phases: int) -> RegConfig:
    return RegConfig(
        net=NetConfig(
            num_phases=num_phases,
            num_downscales=args.num_downscales,
            base_channels=args.base_channels,
            inference_scale=args.inference_scale,
        ),
        weights=LossWeights(args.lambda0, args.lambda1, args.ncc_window),
        learning_rate=args.learning_rate,
        n_stop=args.n_stop,
        sigma_stop=args.sigma_stop,
        n_iter_min=args.n_iter_min,
        max_iters=args.max_iters,
        seed=args.seed,
        cyclic_enabled=not args.no_cyclic,
        device=args.device,
    )


def _add_case_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="case manifest (JSON)")
    p.add_argument("--data-root", default=os.environ.get(dataio.DATA_ROOT_ENV),
                   help=f"dataset root (default ${dataio.DATA_ROOT_ENV})")
    p.add_argument("--crop-margin", type=int, default=None,
                   help="override the manifest's landmark-crop margin")
    p.add_argument("--no-crop", action="store_true")
    p.add_argument("--crop-box", type=int, nargs=6, metavar=("Z0", "Z1", "Y0", "Y1", "X0", "X1"),
                   help="explicit crop (start inclusive, end exclusive), for landmark-free cases")


def _crop_with_box(group, landmark_sets, box):
    z0, z1, y0, y1, x0, x1 = box
    lo = np.array([z0, y0, x0])
    sl = (slice(z0, z1), slice(y0, y1), slice(x0, x1))
    dims = tuple(s.stop - s.start for s in sl)
    grid = Grid3(dims, group.grid.spacing)
    cropped = ImageGroup(tuple(Volume(grid, v.data[sl]) for v in group.volumes),
                         group.phase_labels)
    shifted = [LandmarkSet(lm.points - lo, convention=ZERO_BASED)
               for lm in landmark_sets]
    return cropped, shifted, tuple(int(v) for v in lo)


def _load_prepared_case(args):
    """manifest -> normalized, cropped group + landmarks + provenance."""
    meta = dataio.load_manifest(args.manifest, args.data_root)
    group, landmark_sets = dataio.load_case(meta)
    group = dataio.normalize_group(group, meta.intensity_divisor, meta.intensity_offset)
    crop_offset = (0, 0, 0)
    if args.crop_box:
        group, landmark_sets, crop_offset = _crop_with_box(
            group, landmark_sets, args.crop_box)
    elif not args.no_crop and landmark_sets:
        margin = meta.crop_margin if args.crop_margin is None else args.crop_margin
        group, landmark_sets, crop_offset = dataio.crop_to_landmarks(
            group, landmark_sets, margin)
    return meta, group, landmark_sets, crop_offset


def _landmarks_for_phase(meta, landmark_sets, phase: int) -> LandmarkSet:
    phases = meta.landmark_phases or tuple(range(len(landmark_sets)))
    for p, lm in zip(phases, landmark_sets):
        if p == phase:
            return lm
    raise ValueError(f"no landmark file annotates phase {phase} "
                     f"(manifest lists phases {list(phases)})")


def _write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_register(args) -> int:
    meta, group, _, crop_offset = _load_prepared_case(args)
    config = _reg_config(args, group.num_phases)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.npz")
    if args.resume:
        fields, report = resume(args.resume, group, config,
                                save_checkpoint_path=ckpt)
    else:
        fields, report = register(group, config, checkpoint_path=ckpt)
    dataio.save_fieldset(fields, os.path.join(args.out, "fields"),
                         labels=group.phase_labels)
    write_trace(report, os.path.join(args.out, "trace.tsv"))
    final = report.loss_trace[-1] if report.loss_trace else None
    _write_json(os.path.join(args.out, "report.json"), {
        "case_id": meta.case_id,
        "seed": report.seed,
        "stop_reason": report.stop_reason,
        "iterations": report.iterations,
        "wall_time_s": report.wall_time,
        "crop_offset": list(crop_offset),
        "dims": list(group.grid.dims),
        "spacing": list(group.grid.spacing),
        "final_loss": None if final is None else {
            "similarity": final.similarity, "smoothness": final.smoothness,
            "cyclic": final.cyclic, "total": final.total,
        },
        "config": asdict(config),
    })
    print(f"{meta.case_id}: {report.stop_reason} after {report.iterations} "
          f"iterations ({report.wall_time:.1f}s); fields in {args.out}/fields")
    return 0


def cmd_evaluate(args) -> int:
    meta, group, landmark_sets, _ = _load_prepared_case(args)
    if not landmark_sets:
        raise ValueError("case has no landmark files to evaluate against")
    spacing = group.grid.spacing
    source = _landmarks_for_phase(meta, landmark_sets, args.source_phase)
    params = InversionParams(args.inv_max_iters, args.inv_tol)

    fieldset = None
    if not args.before:
        if not args.fields:
            raise ValueError("--fields is required unless --before is given")
        fieldset = dataio.load_fieldset(args.fields)
        if fieldset.grid.dims != group.grid.dims:
            raise ValueError(
                f"fieldset dims {fieldset.grid.dims} do not match prepared "
                f"case dims {group.grid.dims} (same crop settings needed)")

    results = {}
    for target_phase in args.target_phase:
        target = _landmarks_for_phase(meta, landmark_sets, target_phase)
        if args.before:
            stats = ev.tre(source, target, spacing)
        else:
            stats = ev.evaluate_registration(
                fieldset, source, target, args.source_phase, target_phase,
                spacing, params)
        label = f"P{args.source_phase:02d}->P{target_phase:02d}"
        results[label] = stats.as_dict()
        mode = "before registration" if args.before else "after registration"
        print(f"{meta.case_id} {label} ({mode}): {stats}")
    if args.out:
        _write_json(args.out, {"case_id": meta.case_id, "mode":
                    "before" if args.before else "after", "results": results})
    return 0


def cmd_pairwise(args) -> int:
    fieldset = dataio.load_fieldset(args.fields)
    params = InversionParams(args.inv_max_iters, args.inv_tol)
    result = pairwise_field(fieldset, args.source_phase, args.target_phase, params)
    dataio.save_field(result.field, args.out)
    flag = "converged" if result.converged else "NOT CONVERGED"
    print(f"phase {args.source_phase} -> {args.target_phase}: inversion {flag} "
          f"after {result.iterations} sweeps "
          f"(max residual {result.max_residual:.4g} voxel); wrote {args.out}")
    return 0


def cmd_phantom(args) -> int:
    spec = dataio.PhantomSpec(
        dims=tuple(args.dims), num_phases=args.num_phases,
        max_amplitude=args.amplitude, num_landmarks=args.landmarks,
        seed=args.seed, periodic=not args.non_periodic,
        spacing=tuple(args.spacing),
    )
    group, truth, landmark_sets = dataio.make_phantom(spec)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_fieldset(truth, os.path.join(args.out, "truth_fields"),
                         labels=group.phase_labels)
    for label, lm in zip(group.phase_labels, landmark_sets):
        np.savetxt(os.path.join(args.out, f"landmarks_{label}.txt"), lm.points,
                   fmt="%.8g", header="z y x (zero-based voxel)", comments="# ")
    for label, vol in zip(group.phase_labels, group.volumes):
        vol.data.astype("<f4").tofile(os.path.join(args.out, f"phase_{label}.f32"))
    _write_json(os.path.join(args.out, "phantom.json"), {
        "spec": asdict(spec), "dims": list(spec.dims),
        "spacing": list(spec.spacing), "voxel_format": "<f4 C-order (D,H,W)",
        "landmark_format": "zero-based (z, y, x) voxel coordinates",
    })
    print(f"phantom written to {args.out} "
          f"({spec.num_phases} phases, dims {spec.dims}, seed {spec.seed})")
    if not args.register:
        return 0

    config = _reg_config(args, group.num_phases)
    fields, report = register(group, config,
                              checkpoint_path=os.path.join(args.out, "checkpoint.npz"))
    dataio.save_fieldset(fields, os.path.join(args.out, "fields"),
                         labels=group.phase_labels)
    write_trace(report, os.path.join(args.out, "trace.tsv"))

    m, n = args.eval_source, args.eval_target
    if not 0 <= m < spec.num_phases or not 0 <= n < spec.num_phases:
        raise ValueError("evaluation phases out of range")
    pre = ev.tre(landmark_sets[m], landmark_sets[n], spec.spacing)
    post = ev.evaluate_registration(fields, landmark_sets[m], landmark_sets[n],
                                    m, n, spec.spacing)
    ratio = post.mean / pre.mean if pre.mean > 0 else float("nan")
    _write_json(os.path.join(args.out, "grade.json"), {
        "seed": report.seed, "stop_reason": report.stop_reason,
        "iterations": report.iterations, "eval_phases": [m, n],
        "pre_mean_mm": pre.mean, "post_mean_mm": post.mean, "ratio": ratio,
        "pre": pre.as_dict(), "post": post.as_dict(),
    })
    print(f"registration: {report.stop_reason} after {report.iterations} iterations")
    print(f"TRE P{m:02d}->P{n:02d}: {pre.mean:.3f} mm before, "
          f"{post.mean:.3f} mm after ({100 * ratio:.1f}%)")
    return 0


def cmd_plots(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    did = []
    if args.trace:
        out = os.path.join(args.out_dir, "loss_curve.png")
        ev.plot_loss_trace(args.trace, out)
        did.append(out)
    if args.tre_json:
        with open(args.tre_json) as f:
            payload = json.load(f)
        for label, stats_dict in payload["results"].items():
            stats = ev.stats_from_errors(stats_dict["errors_mm"])
            base = os.path.join(args.out_dir, f"tre_hist_{label.replace('->', '_')}")
            ev.export_tre_histogram(stats, base + ".png", base + ".tsv")
            did.append(base + ".png")
    if args.fields and args.manifest:
        meta, group, _, _ = _load_prepared_case(args)
        fieldset = dataio.load_fieldset(args.fields)
        warped = ImageGroup(
            tuple(warp(v, f) for v, f in zip(group.volumes, fieldset.fields)),
            group.phase_labels)
        template = implicit_template(warped)
        idx = args.slice if args.slice is not None else group.grid.dims[args.axis] // 2
        did += ev.export_difference_maps(group, fieldset, template, idx,
                                         args.out_dir, axis=args.axis)
    if not did:
        raise ValueError("nothing to plot: pass --trace, --tre-json, "
                         "or --fields with --manifest")
    print("wrote " + ", ".join(did))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="reg4d",
        description="Groupwise one-shot deformable registration for 4D image groups",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="optimize fields for one case")
    _add_case_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_reg_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="landmark TRE for a registered case")
    _add_case_flags(p)
    p.add_argument("--fields", help="fieldset directory from `register`")
    p.add_argument("--source-phase", type=int, default=0)
    p.add_argument("--target-phase", type=int, nargs="+", default=[5])
    p.add_argument("--before", action="store_true",
                   help="score the unregistered landmarks instead")
    p.add_argument("--inv-max-iters", type=int, default=50)
    p.add_argument("--inv-tol", type=float, default=0.01)
    p.add_argument("--out", help="write results as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pairwise", help="extract the phase-m to phase-n field")
    p.add_argument("--fields", required=True)
    p.add_argument("--source-phase", type=int, required=True)
    p.add_argument("--target-phase", type=int, required=True)
    p.add_argument("--out", required=True, help="output .dvf path")
    p.add_argument("--inv-max-iters", type=int, default=50)
    p.add_argument("--inv-tol", type=float, default=0.01)
    p.set_defaults(func=cmd_pairwise)

    p = sub.add_parser("phantom", help="generate (and optionally register) a phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[48, 48, 48])
    p.add_argument("--num-phases", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--landmarks", type=int, default=50)
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--non-periodic", action="store_true")
    p.add_argument("--register", action="store_true",
                   help="also run registration and self-grade against the truth")
    p.add_argument("--eval-source", type=int, default=1)
    p.add_argument("--eval-target", type=int, default=3)
    _add_reg_flags(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("plots", help="loss curves, TRE histograms, difference maps")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trace", help="trace.tsv from `register`")
    p.add_argument("--tre-json", help="results JSON from `evaluate`")
    p.add_argument("--manifest")
    p.add_argument("--data-root", default=os.environ.get(dataio.DATA_ROOT_ENV))
    p.add_argument("--crop-margin", type=int, default=None)
    p.add_argument("--no-crop", action="store_true")
    p.add_argument("--crop-box", type=int, nargs=6)
    p.add_argument("--fields", help="fieldset directory for difference maps")
    p.add_argument("--axis", type=int, default=0, choices=(0, 1, 2))
    p.add_argument("--slice", type=int, default=None)
    p.set_defaults(func=cmd_plots)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # surface one parsable line, nonzero exit
        print(f"ERROR: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
