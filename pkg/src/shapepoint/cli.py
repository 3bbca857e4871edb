"""Command-line entry point: synth, gt-points, train, eval, compare, export-ply.

Every command validates its inputs before writing anything, writes files
atomically, and exits nonzero with a single-line `error: <Type>: <message>`
on failure.  The `SHAPEPOINT_SEED` environment variable overrides the
configured seed for `synth` and `train`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import trainer
from .errors import ConfigurationError, FormatError, ShapePointError
from .surface import gt_points, write_points_csv, write_points_ply, PointSet
from .synthvol import (SynthConfig, generate_case, load_case, load_manifest,
                       mix_seed, save_manifest, split_dataset, store_case,
                       atomic_write_text)
from .trainer import (MODES, TrainConfig, comparison_tables, evaluate,
                      load_checkpoint, run_dir_name, run_single, GT_POINT_STREAM)

_CASE_STREAM = 1000  # mix_seed salt offset for per-case generation seeds


def _env_seed() -> int | None:
    raw = os.environ.get("SHAPEPOINT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"SHAPEPOINT_SEED must be an integer, got {raw!r}")


@dataclass
class ExperimentSpec:
    """Parsed experiment config file: data + runs layout, mode matrix, seeds."""

    data_dir: str
    runs_dir: str
    modes: list[str] = field(default_factory=lambda: list(MODES))
    seeds: list[int] = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds list must be non-empty")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigurationError(f"unknown mode {mode!r}; choose from {MODES}")
        for key in ("mode", "seed"):
            if key in self.train:
                raise ConfigurationError(
                    f"train overrides must not set {key!r}; use modes/seeds lists"
                )

    @classmethod
    def load(cls, path, require_data: bool = True) -> "ExperimentSpec":
        """Parse a spec file.

        ``require_data=False`` skips the data_dir existence check for
        callers that create the dataset themselves (experiment drivers).
        """
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"missing spec file {path}")
        except json.JSONDecodeError as exc:
            raise FormatError(f"spec file {path} is not valid JSON: {exc}")
        known = {"data_dir", "runs_dir", "modes", "seeds", "train", "synth"}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown spec fields: {unknown}")
        if "data_dir" not in payload:
            raise ConfigurationError("spec file must set data_dir")
        payload.setdefault("runs_dir", "runs")
        spec = cls(**payload)
        if require_data and not Path(spec.data_dir).is_dir():
            raise ConfigurationError(f"data_dir {spec.data_dir!r} does not exist")
        return spec

    def config_for(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig(mode=mode, seed=seed, **self.train)


def _manifest_path(data_dir) -> Path:
    return Path(data_dir) / "manifest.json"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    dims = (args.dims,) * 3
    overrides = {}
    if args.noise is not None:
        overrides["noise"] = args.noise
    if args.contrast is not None:
        overrides["contrast"] = args.contrast
    config = SynthConfig.for_preset(args.preset, dims=dims, seed=seed, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ids = [f"{i:03d}" for i in range(args.cases)]
    manifest = split_dataset(ids, ratios=tuple(args.ratios), seed=seed)
    for entry in manifest.cases:
        entry.seed = mix_seed(seed, _CASE_STREAM + int(entry.case_id))
        entry.path = f"case_{entry.case_id}"
    manifest.config = {"preset": args.preset, "dims": list(dims), "seed": seed,
                       "cases": args.cases, "noise": config.noise,
                       "contrast": config.contrast}
    for entry in manifest.cases:
        volume, mask = generate_case(config, case_seed=entry.seed)
        store_case(out / entry.path, volume, mask, seed=entry.seed, preset=args.preset)
    save_manifest(_manifest_path(out), manifest)
    print(f"wrote {args.cases} cases + manifest to {out}")
    return 0


def cmd_gt_points(args) -> int:
    manifest = load_manifest(_manifest_path(args.data))
    root = Path(args.data)
    for entry in manifest.cases:
        case_dir = root / entry.path
        _, mask, _ = load_case(case_dir)
        pts = gt_points(mask, args.n_points, seed=mix_seed(entry.seed, GT_POINT_STREAM))
        write_points_csv(case_dir / "points_gt.csv", pts)
        write_points_ply(case_dir / "points_gt.ply", pts, mask.dims)
    print(f"wrote points_gt.csv/.ply for {len(manifest.cases)} cases ({args.n_points} points)")
    return 0


def cmd_train(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    manifest = load_manifest(_manifest_path(spec.data_dir))
    seeds = spec.seeds
    env = _env_seed()
    if env is not None:
        seeds = [env]
    if args.seed is not None:
        seeds = [args.seed]
    modes = [args.mode] if args.mode else spec.modes
    if args.mode and args.mode not in MODES:
        raise ConfigurationError(f"unknown mode {args.mode!r}; choose from {MODES}")
    for mode in modes:
        for seed in seeds:
            out_dir = Path(spec.runs_dir) / run_dir_name(mode, seed)
            _, record, report = run_single(
                manifest, spec.config_for(mode, seed), spec.data_dir, out_dir
            )
            best = record.best_val_dice
            dice_agg = report.aggregates.get("dice", {})
            print(
                f"{run_dir_name(mode, seed)}: {len(record.epochs)} epochs, "
                f"best val dice {best if best is None else round(best, 4)}, "
                f"test dice {round(dice_agg.get('mean', float('nan')), 4)}"
            )
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(_manifest_path(args.data))
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, manifest, args.split, args.data)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"metrics_{args.split}.json"
    report.save(out, out.with_suffix(".csv"))
    print(f"wrote {out}; aggregates: " + json.dumps(report.aggregates))
    return 0


def cmd_compare(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    reports = {}
    missing = []
    for mode in spec.modes:
        for seed in spec.seeds:
            path = Path(spec.runs_dir) / run_dir_name(mode, seed) / "metrics.json"
            if not path.exists():
                missing.append(str(path))
                continue
            reports[(mode, seed)] = trainer.MetricsReport.load(path)
    if missing:
        raise ConfigurationError(f"missing run metrics: {missing}")
    markdown, payload = comparison_tables(reports)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(prefix.with_suffix(".md"), markdown)
    atomic_write_text(prefix.with_suffix(".json"), json.dumps(payload, indent=2) + "\n")
    print(f"wrote {prefix.with_suffix('.md')} and {prefix.with_suffix('.json')}")
    return 0


def cmd_export_ply(args) -> int:
    manifest = load_manifest(_manifest_path(args.data))
    entry = manifest.entry(args.case)
    volume, mask, _ = load_case(Path(args.data) / entry.path)
    model, _ = load_checkpoint(args.checkpoint)
    import torch

    with torch.no_grad():
        _, _, points = model(torch.from_numpy(volume.data.copy()))
    if points is None:
        raise ConfigurationError(
            f"checkpoint mode {model.train_config.mode!r} has no point generator"
        )
    ps = PointSet(points.numpy().astype(float))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_points_ply(out, ps, mask.dims)
    if args.csv:
        write_points_csv(out.with_suffix(".csv"), ps)
    print(f"wrote {out} ({len(ps)} points)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapepoint",
        description="Adversarial shape learning on synthetic volumes: "
        "data synthesis, training, evaluation, comparison.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--cases", type=int, default=40, help="number of cases")
    p.add_argument("--preset", choices=("simple", "complex"), default="complex")
    p.add_argument("--dims", type=int, default=32, help="cubic volume edge length")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.5, 0.25, 0.25),
                   metavar=("TRAIN", "VAL", "TEST"), help="split ratios")
    p.add_argument("--noise", type=float, default=None,
                   help="override the preset's additive noise level")
    p.add_argument("--contrast", type=float, default=None,
                   help="override the preset's foreground/background contrast")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gt-points", help="extract ground-truth surface points per case",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--n-points", type=int, default=512,
                   help="points per case (2048 matches the paper-scale default)")
    p.set_defaults(func=cmd_gt_points)

    p = sub.add_parser("train", help="train the mode matrix from a spec file",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True, help="experiment spec JSON")
    p.add_argument("--mode", default=None, help="restrict to a single mode")
    p.add_argument("--seed", type=int, default=None,
                   help="restrict to a single seed (overrides spec and env)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="build comparison tables over finished runs",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True)
    p.add_argument("--out-prefix", default="runs/comparison",
                   help="output path prefix for .md/.json")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-ply", help="export generated points for one case",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True, help="case id from the manifest")
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--csv", action="store_true", help="also write a CSV next to it")
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ShapePointError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2
    except OSError as exc:
        message = " ".join(str(exc).split())
        print(f"error: OSError: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
