"""Baseline landmark error on a real 4D CT case, optionally with a full run.

Needs the dataset on disk. Point REG4D_DATA_ROOT at the directory that
contains Case1Pack/ (see manifests/dirlab_case1.json for the expected
layout), then:

    python3 demos/04_real_case.py                  # baseline TRE only
    python3 demos/04_real_case.py --register       # full optimization (slow on CPU)
"""

import argparse
import os
import sys

from reg4d.dataio import (DATA_ROOT_ENV, crop_to_landmarks, load_case,
                          load_manifest, normalize_group)
from reg4d.evaluate import evaluate_registration, tre
from reg4d.network import NetConfig
from reg4d.optimize import RegConfig, register

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_MANIFEST = os.path.join(HERE, "..", "manifests", "dirlab_case1.json")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--manifest", default=DEFAULT_MANIFEST)
    ap.add_argument("--register", action="store_true")
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--max-iters", type=int, default=3000)
    args = ap.parse_args()

    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        sys.exit(f"set {DATA_ROOT_ENV} to the directory containing the case data")

    meta = load_manifest(args.manifest, data_root=root)
    missing = [p for p in meta.phase_files + meta.landmark_files
               if not os.path.exists(p)]
    if missing:
        sys.exit(f"missing files (adjust the manifest to your pack layout):\n  "
                 + "\n  ".join(missing[:4]))

    group, landmark_sets = load_case(meta)
    print(f"{meta.case_id}: {group.num_phases} phases, dims {meta.dims}, "
          f"spacing {meta.spacing} mm")

    src = meta.landmark_phases.index(0)
    tgt = meta.landmark_phases.index(5)
    before = tre(landmark_sets[src], landmark_sets[tgt], meta.spacing)
    print(f"baseline TRE phases 0->5: {before}")

    if not args.register:
        return

    group = normalize_group(group, meta.intensity_divisor, meta.intensity_offset)
    group, landmark_sets, offset = crop_to_landmarks(group, landmark_sets,
                                                     meta.crop_margin)
    print(f"cropped to {group.grid.dims} (offset {offset})")

    config = RegConfig(net=NetConfig(num_phases=group.num_phases),
                       max_iters=args.max_iters, device=args.device)
    fields, report = register(group, config)
    print(f"stopped after {report.iterations} iterations ({report.stop_reason})")

    after = evaluate_registration(fields, landmark_sets[src], landmark_sets[tgt],
                                  0, 5, meta.spacing)
    print(f"registered TRE phases 0->5: {after}")


if __name__ == "__main__":
    main()
