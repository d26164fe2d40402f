"""Experiment-driver and CLI plumbing tests on miniature configurations."""

import json
import subprocess
import sys

import numpy as np
import pytest

from pointprune.harness import (
    ExperimentConfig,
    ResultRow,
    baseline_checkpoint_stem,
    run_ablation,
    run_layer_rates_report,
    run_ordering_study,
    run_variance_study,
    write_result_rows,
)
from pointprune.importance import score_network
from pointprune.network import (
    BlockSpec,
    HeadSpec,
    NetworkSpec,
    count_flops,
    evaluate,
    flops_reduction_percent,
    init_network,
    load_checkpoint,
    save_checkpoint,
    train,
)
from pointprune.pointcloud import generate_dataset, save_dataset
from pointprune.pruning import LayerPlan, PruningPlan, make_plan


def tiny_spec():
    return NetworkSpec(
        blocks=[BlockSpec(8, 0.8, 4, [6, 5]), BlockSpec(4, 1.8, 4, [6])],
        head=HeadSpec(hidden=5, classes=8))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset splits plus one trained baseline checkpoint."""
    root = tmp_path_factory.mktemp("mini")
    data_dir = root / "data"
    for split, seed, count in (("train", 11, 24), ("test", 12, 16),
                               ("score", 13, 16)):
        clouds = generate_dataset(seed, count, 32)
        save_dataset(clouds, data_dir / split, seed=seed)
    ckpt_dir = root / "ckpt"
    clouds = generate_dataset(11, 24, 32)
    state = init_network(tiny_spec(), seed=0)
    state, _ = train(state, clouds, epochs=3, batch_size=8, seed=0)
    save_checkpoint(state, baseline_checkpoint_stem(ckpt_dir, 0))
    return {"root": root, "data": data_dir, "ckpt": ckpt_dir, "state": state}


def mini_config(workspace, experiment, **overrides):
    base = dict(
        experiment=experiment,
        seeds=[0],
        rates=[0.0, 0.5],
        pruner="l1",
        dataset=str(workspace["data"]),
        checkpoint_dir=str(workspace["ckpt"]),
        out_dir=str(workspace["root"] / experiment),
        finetune_epochs=1,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestExperimentConfig:
    def test_round_trip(self, workspace, tmp_path):
        config = mini_config(workspace, "ordering")
        config.to_json(tmp_path / "cfg.json")
        loaded = ExperimentConfig.from_json(tmp_path / "cfg.json")
        assert loaded == config

    def test_unknown_experiment_rejected(self, workspace):
        with pytest.raises(ValueError, match="experiment"):
            mini_config(workspace, "frobnicate")

    def test_bad_rate_rejected(self, workspace):
        with pytest.raises(ValueError, match="rates"):
            mini_config(workspace, "ordering", rates=[1.5])

    def test_empty_seeds_rejected(self, workspace):
        with pytest.raises(ValueError, match="seeds"):
            mini_config(workspace, "ordering", seeds=[])


class TestOrderingStudy:
    def test_rate_zero_equals_baseline_exactly(self, workspace):
        config = mini_config(workspace, "ordering")
        rows = run_ordering_study(config)
        from pointprune.pointcloud import load_dataset
        test_clouds, _ = load_dataset(workspace["data"] / "test")
        base_oa = evaluate(workspace["state"], test_clouds)["oa"]
        for row in rows:
            if row.rate == 0.0:
                assert row.oa == base_oa
                assert row.flop_reduction == 0.0

    def test_rows_and_files(self, workspace):
        config = mini_config(workspace, "ordering")
        rows = run_ordering_study(config)
        assert len(rows) == 1 * 2 * 3  # seeds x rates x selections
        csv_path = workspace["root"] / "ordering" / "ordering.csv"
        assert csv_path.exists()
        header = open(csv_path).readline().strip().split(",")
        assert header == ["experiment", "seed", "rate", "pruner", "plugin",
                          "oa", "macc", "params", "flops",
                          "flop_reduction_pct"]
        summary = json.load(open(workspace["root"] / "ordering"
                                 / "ordering_summary.json"))
        assert set(summary) == {"0.0000", "0.5000"}

    def test_flop_reduction_matches_count_flops(self, workspace):
        config = mini_config(workspace, "ordering")
        rows = run_ordering_study(config)
        base = count_flops(workspace["state"].spec, 32)
        for row in rows:
            assert 0.0 <= row.flop_reduction < 100.0
            # reduction column must be recomputable from the flops column
            assert row.flop_reduction == pytest.approx(
                100.0 * (1 - row.flops / base.total_flops), abs=1e-9)

    def test_rerun_is_byte_identical(self, workspace):
        config = mini_config(workspace, "ordering")
        run_ordering_study(config)
        first = (workspace["root"] / "ordering" / "ordering.csv").read_bytes()
        run_ordering_study(config)
        second = (workspace["root"] / "ordering" / "ordering.csv").read_bytes()
        assert first == second

    def test_missing_checkpoint_errors(self, workspace):
        config = mini_config(workspace, "ordering", seeds=[7])
        with pytest.raises(FileNotFoundError, match="baseline"):
            run_ordering_study(config)

    def test_checkpoint_never_mutated(self, workspace):
        stem = baseline_checkpoint_stem(workspace["ckpt"], 0)
        before = (open(f"{stem}.bin", "rb").read(), open(f"{stem}.json").read())
        run_ordering_study(mini_config(workspace, "ordering"))
        after = (open(f"{stem}.bin", "rb").read(), open(f"{stem}.json").read())
        assert before == after


class TestAblation:
    def test_grid_and_base_cell_semantics(self, workspace):
        config = mini_config(workspace, "ablation", rates=[0.5])
        rows = run_ablation(config)
        assert len(rows) == 4  # plugins x 1 rate x 1 seed
        plugins = sorted(r.plugin for r in rows)
        assert plugins == ["ce", "ce+kr", "kr", "none"]
        # the base cell must equal pruning with plugins disabled end to end
        from pointprune.pointcloud import load_dataset
        from pointprune.pruning import finetune, rewrite
        score_clouds, _ = load_dataset(workspace["data"] / "score")
        train_clouds, _ = load_dataset(workspace["data"] / "train")
        test_clouds, _ = load_dataset(workspace["data"] / "test")
        report = score_network(workspace["state"], score_clouds, pruner="l1",
                               use_ce=False, use_kr=False)
        plan = make_plan(report, rates=0.5)
        pruned, _ = rewrite(workspace["state"], plan)
        tuned, _ = finetune(pruned, train_clouds, epochs=1, seed=0)
        want = evaluate(tuned, test_clouds)["oa"]
        got = [r.oa for r in rows if r.plugin == "none"][0]
        assert got == want

    def test_schema_matches_result_row(self, workspace):
        config = mini_config(workspace, "ablation", rates=[0.5])
        rows = run_ablation(config)
        for row in rows:
            assert isinstance(row, ResultRow)
            assert 0.0 <= row.oa <= 100.0
            assert 0.0 <= row.macc <= 100.0


class TestVarianceStudy:
    def test_summary_and_files(self, workspace):
        config = mini_config(workspace, "variance")
        summary = run_variance_study(config)
        assert summary["layer"] == "sa1.mlp0"
        per_seed = summary["per_seed"]["0"]
        assert not per_seed["degenerate"]
        assert 0.0 <= per_seed["fraction_lower"] <= 1.0
        csv_path = workspace["root"] / "variance" / "variance_seed0.csv"
        header = open(csv_path).readline().strip()
        assert header == "channel,var_base,var_kr,lower"

    def test_single_sample_split_is_degenerate(self, workspace, tmp_path):
        data_dir = tmp_path / "data1"
        for split, seed in (("train", 1), ("test", 2), ("score", 3)):
            clouds = generate_dataset(seed, 1, 32)
            save_dataset(clouds, data_dir / split, seed=seed)
        config = mini_config(workspace, "variance",
                             dataset=str(data_dir),
                             out_dir=str(tmp_path / "out"))
        with pytest.warns(UserWarning, match="degenerate"):
            summary = run_variance_study(config)
        per_seed = summary["per_seed"]["0"]
        assert per_seed["degenerate"]
        assert per_seed["fraction_lower"] is None


class TestLayerRatesReport:
    def test_identity_plan_rates_zero(self, workspace, tmp_path):
        state = workspace["state"]
        layers = {
            lid: LayerPlan(np.ones(state.params[f"{lid}.weight"].shape[1],
                                   bool),
                           state.params[f"{lid}.weight"].shape[1])
            for lid in state.spec.mlp_layer_ids()}
        plan = PruningPlan(layers=layers, mode="uniform-rate", rates={},
                           report_id="id")
        plan.save(tmp_path / "plan.json")
        rows = run_layer_rates_report(tmp_path / "plan.json",
                                      tmp_path / "rates.csv")
        assert all(row["pruned_fraction"] == 0.0 for row in rows)

    def test_real_plan_fractions_recomputed(self, workspace, tmp_path):
        from pointprune.pointcloud import load_dataset
        score_clouds, _ = load_dataset(workspace["data"] / "score")
        report = score_network(workspace["state"], score_clouds, pruner="l1",
                               use_kr=False)
        plan = make_plan(report, rates=0.5)
        plan.save(tmp_path / "plan.json")
        rows = run_layer_rates_report(tmp_path / "plan.json",
                                      tmp_path / "rates.csv")
        for row in rows:
            lp = plan.layers[row["layer"]]
            assert row["pruned_fraction"] == pytest.approx(
                1.0 - lp.kept / lp.mask.size, abs=1e-12)
            assert abs(row["pruned_fraction"] - 0.5) <= 0.2  # rounding aside


def run_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "pointprune.cli", *argv],
        capture_output=True, text=True)


class TestCli:
    def test_full_pipeline(self, tmp_path):
        data = tmp_path / "data"
        out = run_cli("gen-data", "--seed", "5", "--out", str(data),
                      "--points", "64", "--train-samples", "16",
                      "--test-samples", "8", "--score-samples", "8")
        assert out.returncode == 0, out.stderr
        ckpt = tmp_path / "model"
        out = run_cli("train", "--dataset", str(data), "--seed", "0",
                      "--out", str(ckpt), "--preset", "study",
                      "--epochs", "1")
        assert out.returncode == 0, out.stderr
        assert (tmp_path / "model_curve.csv").exists()

        out = run_cli("score", "--checkpoint", str(ckpt), "--dataset",
                      str(data), "--pruner", "l1", "--plugin", "cp3",
                      "--out", str(tmp_path / "report"))
        assert out.returncode == 0, out.stderr

        pruned = tmp_path / "pruned"
        out = run_cli("prune", "--checkpoint", str(ckpt), "--dataset",
                      str(data), "--rate", "0.5", "--pruner", "l1",
                      "--plugin", "cp3", "--report",
                      str(tmp_path / "report.json"), "--out", str(pruned))
        assert out.returncode == 0, out.stderr
        payload = json.loads(out.stdout)
        assert payload["flop_reduction_pct"] > 0

        out = run_cli("finetune", "--checkpoint", str(pruned), "--dataset",
                      str(data), "--epochs", "1", "--out",
                      str(tmp_path / "tuned"))
        assert out.returncode == 0, out.stderr

        out = run_cli("eval", "--checkpoint", str(tmp_path / "tuned"),
                      "--dataset", str(data))
        assert out.returncode == 0, out.stderr
        metrics = json.loads(out.stdout)
        assert set(metrics) == {"oa", "macc", "params", "flops"}

        out = run_cli("study", "layer-rates", "--plan",
                      str(tmp_path / "pruned_plan.json"),
                      "--out", str(tmp_path / "rates.csv"))
        assert out.returncode == 0, out.stderr
        assert (tmp_path / "rates.csv").exists()

    def test_failure_emits_error_json_and_nonzero_exit(self, tmp_path):
        out = run_cli("eval", "--checkpoint", str(tmp_path / "nope"),
                      "--dataset", str(tmp_path))
        assert out.returncode == 1
        payload = json.loads(out.stderr.strip().splitlines()[-1])
        assert "error" in payload and "message" in payload


def test_write_result_rows_orders_canonically(tmp_path):
    rows = [
        ResultRow("x", 1, 0.5, "l1", "ce", 10.0, 10.0, 1, 1, 0.0),
        ResultRow("x", 0, 0.7, "l1", "kr", 11.0, 11.0, 1, 1, 0.0),
        ResultRow("x", 0, 0.5, "l1", "ce", 12.0, 12.0, 1, 1, 0.0),
    ]
    write_result_rows(rows, tmp_path / "rows.csv")
    lines = open(tmp_path / "rows.csv").read().splitlines()
    assert lines[1].startswith("x,0,0.5000")
    assert lines[2].startswith("x,0,0.7000")
    assert lines[3].startswith("x,1,0.5000")
