"""Experiment drivers: ordering/ablation/variance studies and rate reports.

Every driver reads an ExperimentConfig, loads pre-generated dataset splits
and per-seed baseline checkpoints, and writes canonical CSV/JSON outputs to
the configured directory. Drivers never mutate checkpoints; re-running with
the same config reproduces the output files byte for byte (rows are sorted
canonically, floats use fixed formats, and nothing time- or path-dependent
is emitted). FLOP and parameter figures always come from ``count_flops`` on
the pruned spec, never from separate arithmetic.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .importance import (
    ImportanceReport,
    combined_score,
    per_sample_layer_scores,
    score_network,
)
from .network import (
    NetworkState,
    count_flops,
    evaluate,
    flops_reduction_percent,
    load_checkpoint,
)
from .pointcloud import PointCloud, load_dataset
from .presets import PRESETS
from .pruning import finetune, make_plan, rewrite

EXPERIMENTS = ("ordering", "ablation", "variance", "layer-rates")
PLUGIN_FLAGS = {
    "none": (False, False),
    "ce": (True, False),
    "kr": (False, True),
    "ce+kr": (True, True),
    "cp3": (True, True),
}
ABLATION_CELLS = ("none", "kr", "ce", "ce+kr")


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list[int]
    rates: list[float]
    pruner: str = "chip"
    plugin: str = "cp3"
    dataset: str = ""
    checkpoint_dir: str = ""
    out_dir: str = ""
    preset: str = "study"
    finetune_epochs: int | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(
                f"experiment '{self.experiment}' is not one of {EXPERIMENTS}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for rate in self.rates:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"rates must lie in [0, 1), got {rate}")
        if self.plugin not in PLUGIN_FLAGS:
            raise ValueError(f"plugin '{self.plugin}' not in {sorted(PLUGIN_FLAGS)}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset '{self.preset}' not in {sorted(PRESETS)}")

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig(**json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @property
    def recipe(self):
        return PRESETS[self.preset][1]


@dataclass
class ResultRow:
    experiment: str
    seed: int
    rate: float
    pruner: str
    plugin: str
    oa: float
    macc: float
    params: int
    flops: int
    flop_reduction: float

    def csv_row(self) -> list[str]:
        return [self.experiment, str(self.seed), f"{self.rate:.4f}",
                self.pruner, self.plugin, f"{self.oa:.4f}",
                f"{self.macc:.4f}", str(self.params), str(self.flops),
                f"{self.flop_reduction:.4f}"]


RESULT_HEADER = ["experiment", "seed", "rate", "pruner", "plugin", "oa",
                 "macc", "params", "flops", "flop_reduction_pct"]


def write_result_rows(rows: list[ResultRow], path) -> None:
    rows = sorted(rows, key=lambda r: (r.seed, r.rate, r.pruner, r.plugin))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())


def load_splits(dataset_dir) -> dict[str, list[PointCloud]]:
    root = Path(dataset_dir)
    splits = {}
    for name in ("train", "test", "score"):
        stem = root / name
        if not (stem.parent / f"{name}.json").exists():
            raise FileNotFoundError(f"dataset split '{stem}.json' not found")
        splits[name], _ = load_dataset(stem)
    return splits


def baseline_checkpoint_stem(checkpoint_dir, seed: int) -> Path:
    return Path(checkpoint_dir) / f"baseline_seed{seed}"


def load_baseline(checkpoint_dir, seed: int) -> NetworkState:
    stem = baseline_checkpoint_stem(checkpoint_dir, seed)
    if not Path(f"{stem}.json").exists():
        raise FileNotFoundError(
            f"missing baseline checkpoint '{stem}.json' (train one first)")
    return load_checkpoint(stem)


def _evaluated_row(config: ExperimentConfig, state: NetworkState,
                   base_flops, test_clouds, seed: int, rate: float,
                   pruner: str, plugin: str) -> ResultRow:
    metrics = evaluate(state, test_clouds)
    report = count_flops(state.spec, test_clouds[0].num_points)
    return ResultRow(
        experiment=config.experiment, seed=seed, rate=rate, pruner=pruner,
        plugin=plugin, oa=metrics["oa"], macc=metrics["macc"],
        params=report.total_params, flops=report.total_flops,
        flop_reduction=flops_reduction_percent(base_flops, report))


def _prune_and_tune(config: ExperimentConfig, state: NetworkState,
                    report: ImportanceReport, rate: float, order: str,
                    train_clouds, seed: int, random_seed: int | None = None):
    """Shared prune -> rewrite -> finetune path; rate 0 returns the baseline
    untouched (its OA must equal the baseline row exactly)."""
    plan = make_plan(report, rates=rate, order=order, seed=random_seed)
    pruned, _ = rewrite(state, plan)
    if rate == 0.0:
        return pruned
    epochs = (config.finetune_epochs if config.finetune_epochs is not None
              else config.recipe.finetune_epochs)
    tuned, _ = finetune(pruned, train_clouds, epochs=epochs, seed=seed)
    return tuned


def run_ordering_study(config: ExperimentConfig) -> list[ResultRow]:
    """Prune by coordinate score descending / random / ascending, fine-tune,
    and report OA per (seed, rate, selection) cell."""
    splits = load_splits(config.dataset)
    out_dir = Path(config.out_dir)
    rows: list[ResultRow] = []
    for seed in config.seeds:
        state = load_baseline(config.checkpoint_dir, seed)
        base_flops = count_flops(state.spec, splits["test"][0].num_points)
        report = score_network(state, splits["score"], pruner="none",
                               use_ce=True, use_kr=False)
        for rate in config.rates:
            for order, tag in (("descending", "ce"), ("random", "random"),
                               ("ascending", "reverse")):
                tuned = _prune_and_tune(
                    config, state, report, rate, order, splits["train"], seed,
                    random_seed=seed * 10000 + int(round(rate * 100)))
                rows.append(_evaluated_row(config, tuned, base_flops,
                                           splits["test"], seed, rate,
                                           "none", tag))
    write_result_rows(rows, out_dir / "ordering.csv")
    _write_ordering_summary(rows, config, out_dir / "ordering_summary.json")
    return rows


def _write_ordering_summary(rows, config, path) -> None:
    summary = {}
    for rate in config.rates:
        cell = {}
        for tag in ("ce", "random", "reverse"):
            vals = [r.oa for r in rows if r.rate == rate and r.plugin == tag]
            cell[tag] = round(float(np.mean(vals)), 4)
        cell["ordered"] = bool(cell["ce"] >= cell["random"] >= cell["reverse"])
        summary[f"{rate:.4f}"] = cell
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def _cell_report(full: ImportanceReport, use_ce: bool, use_kr: bool) -> ImportanceReport:
    """Recombine an all-plugins report with some plug-ins disabled."""
    scores = []
    for lid in full.layers():
        base = full.vector(lid, "base")
        ce = full.vector(lid, "ce") if use_ce else np.zeros_like(base)
        kr = full.vector(lid, "kr") if use_kr else np.zeros_like(base)
        scores.extend(combined_score(base, ce, kr, lid,
                                     num_samples_used=full.metadata["num_samples"]))
    meta = dict(full.metadata)
    meta["use_ce"] = use_ce
    meta["use_kr"] = use_kr
    meta["report_id"] = (f"{meta['pruner']}|ce={int(use_ce)}|kr={int(use_kr)}"
                         f"|samples={meta['num_samples']}")
    return ImportanceReport(scores=scores, metadata=meta)


def run_ablation(config: ExperimentConfig) -> list[ResultRow]:
    """Base pruner alone vs +KR, +CE, +CE+KR at each configured rate."""
    splits = load_splits(config.dataset)
    out_dir = Path(config.out_dir)
    rows: list[ResultRow] = []
    for seed in config.seeds:
        state = load_baseline(config.checkpoint_dir, seed)
        base_flops = count_flops(state.spec, splits["test"][0].num_points)
        full = score_network(state, splits["score"], pruner=config.pruner,
                             use_ce=True, use_kr=True)
        for rate in config.rates:
            for plugin in ABLATION_CELLS:
                use_ce, use_kr = PLUGIN_FLAGS[plugin]
                report = _cell_report(full, use_ce, use_kr)
                tuned = _prune_and_tune(config, state, report, rate,
                                        "descending", splits["train"], seed)
                rows.append(_evaluated_row(config, tuned, base_flops,
                                           splits["test"], seed, rate,
                                           config.pruner, plugin))
    write_result_rows(rows, out_dir / "ablation.csv")
    _write_ablation_summary(rows, config, out_dir / "ablation_summary.json")
    return rows


def _write_ablation_summary(rows, config, path) -> None:
    summary = {}
    for rate in config.rates:
        cell = {}
        for plugin in ABLATION_CELLS:
            vals = [r.oa for r in rows if r.rate == rate and r.plugin == plugin]
            cell[plugin] = round(float(np.mean(vals)), 4)
        cell["cp3_beats_base"] = bool(cell["ce+kr"] >= cell["none"])
        summary[f"{rate:.4f}"] = cell
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def run_variance_study(config: ExperimentConfig) -> dict:
    """Per-channel variance of the coordinate score with and without the
    recycling term, on the deepest layer, across the scoring split.

    The recycling-augmented per-sample score is the mean of the per-sample
    coordinate and recycling scores (the pooled estimator whose stability the
    recycling module exists to provide); samples without recycling fall back
    to the coordinate score alone.
    """
    splits = load_splits(config.dataset)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"per_seed": {}, "layer": None}
    for seed in config.seeds:
        state = load_baseline(config.checkpoint_dir, seed)
        spec = state.spec
        last_block = len(spec.blocks) - 1
        layer = f"sa{last_block}.mlp{len(spec.blocks[last_block].mlp_widths) - 1}"
        summary["layer"] = layer
        ce_mat, kr_mat = per_sample_layer_scores(state, splits["score"], layer)
        augmented = np.where(np.isnan(kr_mat), ce_mat, 0.5 * (ce_mat + kr_mat))
        degenerate = ce_mat.shape[0] < 2
        if degenerate:
            warnings.warn("variance study needs at least 2 scoring samples; "
                          "variances are degenerate")
            var_ce = np.zeros(ce_mat.shape[1])
            var_aug = np.zeros(ce_mat.shape[1])
            fraction = None
        else:
            var_ce = ce_mat.var(axis=0, ddof=1)
            var_aug = augmented.var(axis=0, ddof=1)
            fraction = float((var_aug < var_ce).mean())
        with open(out_dir / f"variance_seed{seed}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "var_base", "var_kr", "lower"])
            for k in range(var_ce.size):
                writer.writerow([k, f"{var_ce[k]:.10g}", f"{var_aug[k]:.10g}",
                                 int(var_aug[k] < var_ce[k])])
        summary["per_seed"][str(seed)] = {
            "fraction_lower": fraction,
            "degenerate": degenerate,
            "num_samples": int(ce_mat.shape[0]),
        }
    with open(out_dir / "variance_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def write_compression_report(base, pruned, path) -> list[dict]:
    """Per-layer FLOP/param accounting of a pruned spec vs its reference.

    Both arguments are FlopsReport objects from ``count_flops``; the emitted
    reduction column is exactly recomputable from the flops columns.
    """
    rows = []
    for lid in base.layers:
        b = base.layers[lid]
        p = pruned.layers.get(lid)
        if p is None:
            continue
        rows.append({
            "layer": lid,
            "base_flops": b.flops,
            "pruned_flops": p.flops,
            "flop_reduction_pct": 100.0 * (1.0 - p.flops / b.flops),
            "base_params": b.params,
            "pruned_params": p.params,
        })
    rows.append({
        "layer": "total",
        "base_flops": base.total_flops,
        "pruned_flops": pruned.total_flops,
        "flop_reduction_pct": flops_reduction_percent(base, pruned),
        "base_params": base.total_params,
        "pruned_params": pruned.total_params,
    })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "base_flops", "pruned_flops",
                         "flop_reduction_pct", "base_params", "pruned_params"])
        for row in rows:
            writer.writerow([row["layer"], row["base_flops"],
                             row["pruned_flops"],
                             f"{row['flop_reduction_pct']:.4f}",
                             row["base_params"], row["pruned_params"]])
    return rows


def run_layer_rates_report(plan_path, out_csv=None) -> list[dict]:
    """Per-layer channel counts and pruned fractions of a saved plan."""
    from .pruning import PruningPlan

    plan = PruningPlan.load(plan_path)
    rows = []
    for lid in sorted(plan.layers):
        lp = plan.layers[lid]
        total = int(lp.mask.size)
        rows.append({
            "layer": lid,
            "channels": total,
            "kept": int(lp.kept),
            "pruned_fraction": 1.0 - lp.kept / total,
        })
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "channels", "kept", "pruned_fraction"])
            for row in rows:
                writer.writerow([row["layer"], row["channels"], row["kept"],
                                 f"{row['pruned_fraction']:.4f}"])
    return rows
