"""Joint multi-task training, evaluation, and the experiment harness.

Four training modes share one model skeleton (backbone + point-network +
two-branch baseline + discriminator, all constructed for every mode so
checkpoints are uniform and same-seed runs start from identical backbone
weights); the mode decides which generator runs and which parameters the
optimizers update.  Per training case: one forward pass, an optional
discriminator step (adversarial mode), then one joint step on
lambda_seg*seg + lambda_cd*CD + lambda_emd*EMD + lambda_al*loss_G.

All randomness (init, case order, ground-truth-perturbation noise) comes
from per-purpose streams derived from the config seed, so a rerun with the
same config reproduces the RunRecord exactly.  Ground-truth point seeds
derive from each case's own seed, independent of the training seed, so
every mode and seed is scored against identical targets.
"""

from __future__ import annotations

import copy
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .adversary import PointSetClassifier, adversarial_losses, generator_loss
from .backbone import UNet3D, UNetConfig, seg_loss
from .errors import ConfigurationError, HarnessError, TrainingError
from .pointgen import PointNetConfig, PointNetwork, TwoBranch
from .shapemetrics import (HIGHER_IS_BETTER, CaseMetrics, MetricsReport, chamfer,
                           dice, emd, hausdorff, avg_surface_distance,
                           outlier_fraction, wilcoxon_signed_rank)
from .surface import PointSet, gt_points, perturb_points
from .synthvol import DatasetManifest, atomic_write_text, load_case, mix_seed

MODES = ("seg_only", "seg+two_branch", "seg+pointnet", "seg+pointnet+al")

# mix_seed salts for the independent RNG streams
_STREAM_INIT = 1
_STREAM_ORDER = 2
_STREAM_NOISE = 3
GT_POINT_STREAM = 7919  # salted with the case seed, not the training seed


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "seg+pointnet+al"
    seed: int = 0
    learning_rate: float = 5e-4
    batch_size: int = 1
    max_epochs: int = 40
    val_cadence: int = 1
    patience: int = 20
    lambda_seg: float = 1.0
    lambda_cd: float = 100.0
    lambda_emd: float = 100.0
    lambda_al: float = 1.0
    n_points: int = 512
    base_channels: int = 8
    seg_loss_kind: str = "bce"
    gt_noise_range: float = 0.005
    exact_emd_max_points: int = 512
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size != 1:
            raise ConfigurationError("only batch size 1 is supported")
        for name in ("lambda_seg", "lambda_cd", "lambda_emd", "lambda_al"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.max_epochs < 0 or self.val_cadence < 1 or self.patience < 0:
            raise ConfigurationError("epochs/cadence/patience out of range")

    @property
    def uses_points(self) -> bool:
        return self.mode != "seg_only"

    @property
    def uses_al(self) -> bool:
        return self.mode == "seg+pointnet+al"

    @property
    def active_terms(self) -> tuple[str, ...]:
        if self.mode == "seg_only":
            return ("seg",)
        if self.uses_al:
            return ("seg", "cd", "emd", "al")
        return ("seg", "cd", "emd")

    def term_weight(self, term: str) -> float:
        return {"seg": self.lambda_seg, "cd": self.lambda_cd,
                "emd": self.lambda_emd, "al": self.lambda_al}[term]

    def emd_mode(self) -> str:
        return "exact" if self.n_points <= self.exact_emd_max_points else "approx"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


class JointModel(nn.Module):
    """Backbone plus every generator/discriminator head, gated by the mode."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.train_config = config
        self.backbone = UNet3D(UNetConfig(base_channels=config.base_channels))
        pcfg = PointNetConfig(n_points=config.n_points)
        cc, cf = self.backbone.coarse_channels, self.backbone.fine_channels
        self.pointnet = PointNetwork(cc, cf, pcfg)
        self.two_branch = TwoBranch(cc, pcfg)
        self.discriminator = PointSetClassifier()

    def generate(self, pyramid) -> torch.Tensor | None:
        mode = self.train_config.mode
        if mode == "seg_only":
            return None
        if mode == "seg+two_branch":
            return self.two_branch(pyramid)
        return self.pointnet(pyramid)

    def forward(self, volume: torch.Tensor):
        pyramid, seg = self.backbone(volume)
        return pyramid, seg, self.generate(pyramid)

    def generator_parameters(self):
        params = list(self.backbone.parameters())
        if self.train_config.mode == "seg+two_branch":
            params += list(self.two_branch.parameters())
        elif self.train_config.uses_points:
            params += list(self.pointnet.parameters())
        return params


# ---------------------------------------------------------------------------
# Dataset access (cached per process; ground-truth points derived per case)
# ---------------------------------------------------------------------------


@dataclass
class LoadedCase:
    case_id: str
    volume: torch.Tensor  # (D, H, W) float32
    mask: object  # MaskVolume
    gt: torch.Tensor  # (n_points, 3) float32


@lru_cache(maxsize=None)
def _load_case_cached(case_dir: str, case_seed: int, n_points: int):
    volume, mask, _ = load_case(case_dir)
    pts = gt_points(mask, n_points, seed=mix_seed(case_seed, GT_POINT_STREAM))
    return (
        torch.from_numpy(volume.data.copy()),
        mask,
        torch.from_numpy(pts.points.astype(np.float32)),
    )


def load_split(manifest: DatasetManifest, root, split: str, n_points: int) -> list[LoadedCase]:
    cases = []
    for cid in manifest.ids(split):
        entry = manifest.entry(cid)
        case_dir = os.path.join(str(root), entry.path or f"case_{cid}")
        vol, mask, gt = _load_case_cached(os.path.abspath(case_dir), entry.seed, n_points)
        cases.append(LoadedCase(case_id=cid, volume=vol, mask=mask, gt=gt))
    return cases


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train: dict
    val_dice: float | None = None
    is_best: bool = False


@dataclass
class RunRecord:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_dice: float | None = None
    stopped_early: bool = False
    total_steps: int = 0

    def summary(self) -> dict:
        return {
            "config": self.config,
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "stopped_early": self.stopped_early,
            "total_steps": self.total_steps,
            "n_epochs": len(self.epochs),
        }

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(asdict(e)) for e in self.epochs]
        atomic_write_text(out_dir / "runrecord.jsonl", "\n".join(lines) + ("\n" if lines else ""))
        atomic_write_text(out_dir / "summary.json", json.dumps(self.summary(), indent=2) + "\n")

    @classmethod
    def load(cls, out_dir) -> "RunRecord":
        out_dir = Path(out_dir)
        with open(out_dir / "summary.json", "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        epochs = []
        with open(out_dir / "runrecord.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    epochs.append(EpochRecord(**json.loads(line)))
        return cls(
            config=summary["config"],
            epochs=epochs,
            best_epoch=summary["best_epoch"],
            best_val_dice=summary["best_val_dice"],
            stopped_early=summary["stopped_early"],
            total_steps=summary["total_steps"],
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _check_finite(value: float, term: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite {term} loss ({value}) at epoch {epoch}, step {step}"
        )


def _validation_dice(model: JointModel, cases: list[LoadedCase]) -> float:
    model.eval()
    scores = []
    with torch.no_grad():
        for case in cases:
            _, seg, _ = model(case.volume)
            pred = (seg > 0.5).numpy().astype(np.uint8)
            scores.append(dice(pred, case.mask))
    model.train()
    return float(np.mean(scores))


def train(manifest: DatasetManifest, config: TrainConfig, root=".") -> tuple[JointModel, RunRecord]:
    """Run the joint loop and return the model at its best validation Dice."""
    train_cases = load_split(manifest, root, "train", config.n_points)
    val_cases = load_split(manifest, root, "validation", config.n_points)
    if not train_cases or not val_cases:
        raise HarnessError("manifest needs non-empty train and validation splits")

    torch.manual_seed(mix_seed(config.seed, _STREAM_INIT) >> 1)
    model = JointModel(config)
    model.train()
    order_rng = np.random.default_rng(mix_seed(config.seed, _STREAM_ORDER))
    noise_rng = np.random.default_rng(mix_seed(config.seed, _STREAM_NOISE))

    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.learning_rate)
    opt_d = (
        torch.optim.Adam(model.discriminator.parameters(), lr=config.learning_rate)
        if config.uses_al
        else None
    )

    record = RunRecord(config=json.loads(config.to_json()))
    best_state = None
    best_dice = -1.0
    rounds_since_best = 0
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(train_cases))
        sums: dict[str, float] = defaultdict(float)
        for idx in order:
            case = train_cases[int(idx)]
            step += 1
            pyramid, seg, points = model(case.volume)

            terms: dict[str, torch.Tensor] = {"seg": seg_loss(seg, case.mask, config.seg_loss_kind)}
            if points is not None:
                terms["cd"] = chamfer(points, case.gt)
                terms["emd"], _ = emd(points, case.gt, mode=config.emd_mode())

            if config.uses_al:
                noise = noise_rng.uniform(
                    -config.gt_noise_range, config.gt_noise_range, size=case.gt.shape
                )
                gt_hat = torch.clamp(
                    case.gt + torch.from_numpy(noise.astype(np.float32)), 0.0, 1.0
                )
                loss_d, _ = adversarial_losses(points, gt_hat, model.discriminator)
                _check_finite(loss_d.item(), "adversarial_d", epoch, step)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                sums["d"] += loss_d.item()
                terms["al"] = generator_loss(points, model.discriminator)

            for name, value in terms.items():
                _check_finite(value.item(), name, epoch, step)
            total = sum(config.term_weight(t) * terms[t] for t in config.active_terms)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            for name, value in terms.items():
                sums[name] += value.item()

        n = len(train_cases)
        means = {name: sums[name] / n for name in sums}
        # the logged total is defined as the weighted sum of the logged
        # sub-losses, so the decomposition invariant holds to float64
        means["total"] = sum(
            config.term_weight(t) * means[t] for t in config.active_terms
        )

        entry = EpochRecord(epoch=epoch, train=means)
        if epoch % config.val_cadence == 0:
            val = _validation_dice(model, val_cases)
            entry.val_dice = val
            if val > best_dice:
                best_dice = val
                best_state = copy.deepcopy(model.state_dict())
                record.best_epoch = epoch
                record.best_val_dice = val
                entry.is_best = True
                rounds_since_best = 0
            else:
                rounds_since_best += 1
        record.epochs.append(entry)
        if config.patience and rounds_since_best >= config.patience:
            record.stopped_early = True
            break

    record.total_steps = step
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, record


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: JointModel, step: int = 0) -> None:
    payload = {
        "state": model.state_dict(),
        "config_json": model.train_config.to_json(),
        "step": int(step),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[JointModel, int]:
    try:
        payload = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise HarnessError(f"missing checkpoint {path}")
    config = TrainConfig.from_json(payload["config_json"])
    model = JointModel(config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, int(payload["step"])


# ---------------------------------------------------------------------------
# Evaluation and comparison
# ---------------------------------------------------------------------------


def evaluate(checkpoint, manifest: DatasetManifest, split: str = "test", root=".") -> MetricsReport:
    """Per-case mask and point metrics for one split; aggregates mean +- sd."""
    if isinstance(checkpoint, JointModel):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    config = model.train_config
    cases = load_split(manifest, root, split, config.n_points)
    if not cases:
        raise HarnessError(f"split {split!r} is empty")

    model.eval()
    report = MetricsReport()
    with torch.no_grad():
        for case in cases:
            _, seg, points = model(case.volume)
            pred = (seg > 0.5).numpy().astype(np.uint8)
            row = CaseMetrics(case_id=case.case_id, split=split)
            row.dice = dice(pred, case.mask)
            if pred.any():
                row.hd = hausdorff(pred, case.mask)
                row.avgd = avg_surface_distance(pred, case.mask)
            else:
                row.missing_prediction = True
            if points is not None:
                row.cd = float(chamfer(points, case.gt))
                value, _ = emd(points, case.gt, mode=config.emd_mode())
                row.emd = float(value)
                row.outlier_fraction = outlier_fraction(points, case.gt)
            report.cases.append(row)
    return report.finalize()


@dataclass
class Comparison:
    metric: str
    p_value: float
    better: str  # "a", "b", or "tie"
    significant: bool
    mean_a: float
    mean_b: float
    n: int


def _paired_comparison(metric: str, a: np.ndarray, b: np.ndarray, n: int) -> Comparison:
    nonzero = int(np.count_nonzero(a - b))
    p = wilcoxon_signed_rank(a, b) if nonzero >= 6 else 1.0
    mean_a, mean_b = float(a.mean()), float(b.mean())
    if mean_a == mean_b:
        better = "tie"
    else:
        a_better = mean_a > mean_b if HIGHER_IS_BETTER[metric] else mean_a < mean_b
        better = "a" if a_better else "b"
    return Comparison(metric=metric, p_value=float(p), better=better,
                      significant=bool(p < 0.05 and better != "tie"),
                      mean_a=mean_a, mean_b=mean_b, n=n)


def compare_runs(report_a: MetricsReport, report_b: MetricsReport, metric: str) -> Comparison:
    """Pair per-case values by case id and run the Wilcoxon signed-rank test.

    Fewer than 6 nonzero paired differences cannot reach significance and
    are reported as p = 1.0.
    """
    va, vb = report_a.values(metric), report_b.values(metric)
    if set(va) != set(vb):
        only_a = sorted(set(va) - set(vb))
        only_b = sorted(set(vb) - set(va))
        raise HarnessError(
            f"case sets differ for metric {metric!r}: only in a: {only_a}; only in b: {only_b}"
        )
    ids = sorted(va)
    a = np.asarray([va[i] for i in ids])
    b = np.asarray([vb[i] for i in ids])
    return _paired_comparison(metric, a, b, len(ids))


# ---------------------------------------------------------------------------
# Experiment harness: mode matrix -> runs/<mode>_<seed>/ -> comparison tables
# ---------------------------------------------------------------------------

POINT_METRICS = ("emd", "cd", "outlier_fraction")
MASK_METRICS = ("dice", "hd", "avgd")


def run_dir_name(mode: str, seed: int) -> str:
    return f"{mode}_{seed}"


def run_single(manifest: DatasetManifest, config: TrainConfig, root=".", out_dir=None):
    """Train one (mode, seed) cell, save its artifacts, return (record, report)."""
    model, record = train(manifest, config, root)
    report = evaluate(model, manifest, "test", root)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.pt", model, record.total_steps)
        record.save(out_dir)
        report.save(out_dir / "metrics.json", out_dir / "metrics.csv")
    return model, record, report


def _pooled(reports: dict, mode: str, metric: str) -> np.ndarray:
    values = []
    for (m, seed) in sorted(reports):
        if m != mode:
            continue
        per_case = reports[(m, seed)].values(metric)
        values.extend(per_case[cid] for cid in sorted(per_case))
    return np.asarray(values, dtype=np.float64)


def _pair_across_seeds(reports: dict, mode_a: str, mode_b: str, metric: str):
    seeds_a = {seed for (m, seed) in reports if m == mode_a}
    seeds_b = {seed for (m, seed) in reports if m == mode_b}
    if seeds_a != seeds_b:
        raise HarnessError(
            f"missing run: seed sets differ between {mode_a!r} ({sorted(seeds_a)}) "
            f"and {mode_b!r} ({sorted(seeds_b)})"
        )
    a, b = [], []
    for (m, seed) in sorted(reports):
        if m != mode_a:
            continue
        va = reports[(m, seed)].values(metric)
        vb = reports[(mode_b, seed)].values(metric)
        if set(va) != set(vb):
            raise HarnessError(f"case sets differ between {(m, seed)} and {(mode_b, seed)}")
        for cid in sorted(va):
            a.append(va[cid])
            b.append(vb[cid])
    return np.asarray(a), np.asarray(b)


def comparison_tables(reports: dict) -> tuple[str, dict]:
    """Markdown + JSON summary over a {(mode, seed): MetricsReport} matrix.

    One table for point-generation metrics and one for segmentation
    metrics (mean +- sd pooled across seeds), plus Wilcoxon p-values for
    every (baseline, variant, metric) pair.  A variant cell is bolded when
    it beats the table's baseline mode with p < 0.05, mirroring the
    convention of comparison tables in segmentation papers.
    """
    modes = [m for m in MODES if any(k[0] == m for k in reports)]
    if not modes:
        raise HarnessError("no runs to compare")

    payload = {"modes": modes, "tables": {}, "p_values": []}
    sections = []

    def fmt(mean, sd, bold):
        cell = f"{mean:.4f} ± {sd:.4f}"
        return f"**{cell}**" if bold else cell

    comparisons = {}
    for table_name, metrics, table_modes in (
        ("point_generation", POINT_METRICS, [m for m in modes if m != "seg_only"]),
        ("segmentation", MASK_METRICS, modes),
    ):
        if not table_modes:
            continue
        baseline = table_modes[0]
        stats = {}
        for metric in metrics:
            for mode in table_modes:
                values = _pooled(reports, mode, metric)
                if values.size == 0:
                    continue
                sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
                stats[(metric, mode)] = (float(values.mean()), sd, values.size)
            for i, mode_a in enumerate(table_modes):
                for mode_b in table_modes[i + 1:]:
                    if (metric, mode_a) not in stats or (metric, mode_b) not in stats:
                        continue
                    a, b = _pair_across_seeds(reports, mode_a, mode_b, metric)
                    comp = _paired_comparison(metric, a, b, len(a))
                    comparisons[(metric, mode_a, mode_b)] = comp
                    payload["p_values"].append({
                        "metric": metric, "baseline": mode_a, "variant": mode_b,
                        "p_value": comp.p_value,
                        "better": {"a": mode_a, "b": mode_b, "tie": "tie"}[comp.better],
                        "significant": comp.significant, "n": comp.n,
                    })

        header = f"| metric | {' | '.join(table_modes)} |"
        rule = "|" + "---|" * (len(table_modes) + 1)
        rows = []
        table_payload = {}
        for metric in metrics:
            cells = []
            for mode in table_modes:
                if (metric, mode) not in stats:
                    cells.append("—")
                    continue
                mean, sd, _ = stats[(metric, mode)]
                bold = False
                if mode != baseline and (metric, baseline) in stats:
                    comp = comparisons.get((metric, baseline, mode))
                    bold = bool(comp and comp.significant and comp.better == "b")
                cells.append(fmt(mean, sd, bold))
                table_payload.setdefault(metric, {})[mode] = {
                    "mean": mean, "sd": sd, "bold": bold,
                }
            rows.append(f"| {metric} | {' | '.join(cells)} |")
        title = table_name.replace("_", " ")
        sections.append(f"## {title} (test split)\n\n{header}\n{rule}\n" + "\n".join(rows))
        payload["tables"][table_name] = {"baseline": baseline, "rows": table_payload}

    pv_rows = ["| metric | baseline | variant | p-value | better |",
               "|---|---|---|---|---|"]
    for item in payload["p_values"]:
        star = "*" if item["significant"] else ""
        pv_rows.append(
            f"| {item['metric']} | {item['baseline']} | {item['variant']} "
            f"| {item['p_value']:.4g}{star} | {item['better']} |"
        )
    sections.append("## Wilcoxon signed-rank tests\n\n" + "\n".join(pv_rows))
    return "\n\n".join(sections) + "\n", payload
