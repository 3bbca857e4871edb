#!/usr/bin/env python3
"""End-to-end experiment driver: synth -> gt-points -> train matrix -> compare.

Reads the same experiment spec JSON as `shapepoint train` / `shapepoint
compare`.  The optional top-level "synth" object supplies dataset
generation parameters:

    {
      "data_dir": "data/trend",
      "runs_dir": "runs/trend",
      "modes": ["seg_only", "seg+two_branch", "seg+pointnet", "seg+pointnet+al"],
      "seeds": [0, 1, 2],
      "train": {"max_epochs": 30, "n_points": 512},
      "synth": {"cases": 40, "dims": 32, "preset": "complex", "seed": 11}
    }

The dataset is only generated when data_dir has no manifest yet (or with
--force-synth); training runs are likewise skipped when their metrics
already exist, so the script can resume an interrupted matrix.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from shapepoint.cli import ExperimentSpec, main as cli_main
from shapepoint.trainer import run_dir_name

SYNTH_FLAGS = ("cases", "dims", "preset", "seed", "noise", "contrast")


def synth_args(spec: ExperimentSpec) -> list[str]:
    args = ["synth", "--out", spec.data_dir]
    for key in SYNTH_FLAGS:
        if key in spec.synth:
            args += [f"--{key}", str(spec.synth[key])]
    if "ratios" in spec.synth:
        args += ["--ratios"] + [str(r) for r in spec.synth["ratios"]]
    unknown = sorted(set(spec.synth) - set(SYNTH_FLAGS) - {"n_points", "ratios"})
    if unknown:
        raise SystemExit(f"unknown synth spec fields: {unknown}")
    return args


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--spec", required=True, help="experiment spec JSON")
    parser.add_argument("--force-synth", action="store_true",
                        help="regenerate the dataset even if a manifest exists")
    parser.add_argument("--skip-compare", action="store_true",
                        help="stop after training (no comparison tables)")
    args = parser.parse_args()

    spec = ExperimentSpec.load(args.spec, require_data=False)
    t0 = time.monotonic()

    manifest = Path(spec.data_dir) / "manifest.json"
    if args.force_synth or not manifest.exists():
        print(f"== synth -> {spec.data_dir}")
        rc = cli_main(synth_args(spec))
        if rc:
            return rc
        gt = ["gt-points", "--data", spec.data_dir]
        if "n_points" in spec.synth:
            gt += ["--n-points", str(spec.synth["n_points"])]
        rc = cli_main(gt)
        if rc:
            return rc
    else:
        print(f"== synth skipped ({manifest} exists)")

    for mode in spec.modes:
        for seed in spec.seeds:
            run_dir = Path(spec.runs_dir) / run_dir_name(mode, seed)
            if (run_dir / "metrics.json").exists():
                print(f"== train skipped ({run_dir} already has metrics)")
                continue
            print(f"== train {mode} seed {seed}")
            rc = cli_main(["train", "--spec", args.spec, "--mode", mode,
                           "--seed", str(seed)])
            if rc:
                return rc

    if not args.skip_compare:
        print("== compare")
        rc = cli_main(["compare", "--spec", args.spec])
        if rc:
            return rc

    print(f"== done in {time.monotonic() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
