"""Acceptance suite: one test per criterion, one printed verdict line each.

The multi-seed study criteria share a session-scoped environment (generated
dataset splits plus five trained study-preset baselines), so this module is
expensive: expect roughly 40 minutes on a 2-core desktop CPU. Run it alone
with `pytest tests/test_acceptance.py -s` to watch the verdict lines.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracle_helpers import (
    ball_query_oracle,
    greedy_fps_oracle,
    instrumented_flops,
    pearson_oracle,
    random_cloud,
    random_spec,
    singular_values_via_gram,
)

import pointprune.network as netmod
from pointprune.harness import (
    ExperimentConfig,
    baseline_checkpoint_stem,
    run_ablation,
    run_ordering_study,
    run_variance_study,
    write_compression_report,
)
from pointprune.importance import (
    ChannelScore,
    ImportanceReport,
    ce_score,
    matrix_rank_tol,
    score_network,
    _chip_from_maps,
)
from pointprune.network import (
    BlockSpec,
    HeadSpec,
    NetworkSpec,
    NetworkState,
    count_flops,
    evaluate,
    forward,
    init_network,
    save_checkpoint,
    train,
)
from pointprune.numerics import finite_diff_check, softmax_cross_entropy
from pointprune.pointcloud import (
    ball_query_group,
    farthest_point_sample,
    generate_dataset,
    save_dataset,
)
from pointprune.presets import STUDY_RECIPE, split_seeds, study_network_spec
from pointprune.pruning import LayerPlan, PruningPlan, finetune, make_plan, rewrite

ACCEPT_SEED = 1234
STUDY_SEEDS = [0, 1, 2, 3, 4]


def verdict(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


@pytest.fixture(scope="session")
def study_env(tmp_path_factory):
    """Dataset splits + five trained study baselines, shared by criteria 4-9."""
    root = tmp_path_factory.mktemp("acceptance")
    data_dir = root / "data"
    recipe = STUDY_RECIPE
    seeds = split_seeds(ACCEPT_SEED)
    splits = {}
    for split, count in (("train", recipe.train_samples),
                         ("test", recipe.test_samples),
                         ("score", recipe.score_samples)):
        clouds = generate_dataset(seeds[split], count, recipe.points_per_cloud)
        save_dataset(clouds, data_dir / split, seed=seeds[split])
        splits[split] = clouds
    ckpt_dir = root / "ckpt"
    states = {}
    baseline_oa = {}
    for seed in STUDY_SEEDS:
        t0 = time.time()
        state = init_network(study_network_spec(), seed=seed)
        state, _ = train(state, splits["train"], epochs=recipe.epochs,
                         batch_size=recipe.batch_size, seed=seed,
                         learning_rate=recipe.learning_rate)
        save_checkpoint(state, baseline_checkpoint_stem(ckpt_dir, seed))
        states[seed] = state
        baseline_oa[seed] = evaluate(state, splits["test"])["oa"]
        print(f"\n[setup] baseline seed {seed}: OA {baseline_oa[seed]:.2f} "
              f"({time.time() - t0:.0f}s)")
    return {"root": root, "data": data_dir, "ckpt": ckpt_dir,
            "splits": splits, "states": states, "baseline_oa": baseline_oa}


def test_criterion_1_gradient_correctness():
    spec = NetworkSpec(
        blocks=[BlockSpec(8, 0.8, 4, [5, 4]), BlockSpec(4, 1.8, 4, [6])],
        head=HeadSpec(hidden=5, classes=3))
    base = init_network(spec, seed=6)  # pinned clear of ReLU kinks at eps=1e-3
    clouds = [random_cloud(31, label=0), random_cloud(32, label=2)]
    coords = np.stack([c.coords for c in clouds])
    labels = np.array([0, 2])
    starts = np.zeros(2, np.int64)

    def loss_fn(params):
        state = NetworkState(spec, params)
        logits, caches, head, _ = netmod._forward_batch(
            state, coords, None, starts, keep_cache=True)
        loss, d_logits = softmax_cross_entropy(logits, labels)
        return loss, netmod._backward_batch(state, caches, head, d_logits)

    t0 = time.time()
    err = finite_diff_check(loss_fn, base.params, epsilon=1e-3)
    elapsed = time.time() - t0
    ok = err < 1e-3 and elapsed < 60
    verdict("criterion 1 (gradient correctness)", ok,
            f"max relative error {err:.2e} in {elapsed:.1f}s")
    assert err < 1e-3
    assert elapsed < 60


def test_criterion_2_oracle_equivalence():
    checked = {}

    for seed in range(100):  # FPS vs exhaustive greedy, every start, n <= 8
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 9))
        m = int(rng.integers(1, n + 1))
        coords = rng.normal(size=(n, 3)).astype(np.float32)
        for start in range(n):
            res = farthest_point_sample(coords, m, start)
            assert res.sampled.tolist() == greedy_fps_oracle(coords, m, start)
    checked["fps"] = 100

    for seed in range(100):  # ball query vs all-pairs filter
        rng = np.random.default_rng(seed + 500)
        coords = rng.normal(size=(16, 3)).astype(np.float32)
        centroids = rng.choice(16, size=4, replace=False)
        radius = float(rng.uniform(0.5, 2.0))
        g = int(rng.integers(1, 9))
        grouping = ball_query_group(coords, None, centroids, radius, g)
        for row, ci in enumerate(centroids):
            assert grouping.neighbor_indices[row].tolist() == \
                ball_query_oracle(coords, ci, radius, g)
    checked["ball_query"] = 100

    tol = 1e-5
    for seed in range(100):  # rank vs 64-bit singular values, same tolerance
        rng = np.random.default_rng(seed + 1000)
        mat = rng.normal(size=(4, 5)).astype(np.float32)
        if seed % 3 == 0:
            mat[2] = mat[0] + mat[1]
        s = singular_values_via_gram(mat)
        want = int((s > tol * s[0]).sum()) if s[0] > 0 else 0
        assert matrix_rank_tol(mat, tol) == want
    checked["rank"] = 100

    for seed in range(100):  # CHIP drop vs 64-bit singular values, 1e-5 abs
        rng = np.random.default_rng(seed + 2000)
        stacked = rng.normal(size=(3, 6))
        full = singular_values_via_gram(stacked).sum()
        want = []
        for k in range(3):
            zeroed = stacked.copy()
            zeroed[k] = 0.0
            want.append(full - singular_values_via_gram(zeroed).sum())
        assert np.allclose(_chip_from_maps([stacked.T]), want, atol=1e-5)
    checked["chip"] = 100

    for seed in range(100):  # CE vs 64-bit Pearson, 1e-5 abs
        rng = np.random.default_rng(seed + 3000)
        coords = rng.normal(size=(5, 3)).astype(np.float32)
        feats = rng.normal(size=(5, 2)).astype(np.float32)
        got = ce_score(feats, coords)
        for k in range(2):
            want = max(abs(pearson_oracle(feats[:, k], coords[:, a]))
                       for a in range(3))
            assert got[k] == pytest.approx(want, abs=1e-5)
    checked["ce"] = 100

    mp = pytest.MonkeyPatch()
    try:
        for seed in range(100):  # FLOP counter vs instrumented forward, exact
            rng = np.random.default_rng(seed + 4000)
            spec, min_points = random_spec(rng)
            n = min_points + int(rng.integers(0, 8))
            state = init_network(spec, seed=seed)
            got = instrumented_flops(state, random_cloud(seed + 4500, n=n), mp)
            assert got == count_flops(spec, n).total_flops
    finally:
        mp.undo()
    checked["flops"] = 100

    verdict("criterion 2 (oracle equivalence)", True,
            f"all suites passed on {checked} seeded instances")


def test_criterion_3_dead_channel_exactness():
    spec = NetworkSpec(
        blocks=[BlockSpec(8, 0.8, 4, [6, 5]), BlockSpec(4, 1.8, 4, [7, 6])],
        head=HeadSpec(hidden=5, classes=8))
    clouds = generate_dataset(seed=606, num_samples=100, points_per_cloud=32)
    layer_ids = spec.mlp_layer_ids()
    for lid in layer_ids:
        state = init_network(spec, seed=17)
        block = int(lid[2])
        mlp = int(lid.split("mlp")[1])
        channel = state.params[f"{lid}.weight"].shape[1] // 2
        widths = spec.blocks[block].mlp_widths
        if mlp + 1 < len(widths):
            state.params[f"sa{block}.mlp{mlp + 1}.weight"][channel, :] = 0.0
        elif block + 1 < len(spec.blocks):
            state.params[f"sa{block + 1}.mlp0.weight"][channel, :] = 0.0
        else:
            state.params["head.fc1.weight"][channel, :] = 0.0
        layers = {}
        for other in layer_ids:
            width = state.params[f"{other}.weight"].shape[1]
            mask = np.ones(width, bool)
            if other == lid:
                mask[channel] = False
            layers[other] = LayerPlan(mask, int(mask.sum()))
        plan = PruningPlan(layers=layers, mode="uniform-rate", rates={},
                           report_id="dead-channel")
        pruned, _ = rewrite(state, plan)
        for cloud in clouds:
            a, _ = forward(state, cloud)
            b, _ = forward(pruned, cloud)
            assert np.array_equal(a, b), f"layer {lid}"
    verdict("criterion 3 (dead-channel exactness)", True,
            f"bit-identical logits on 100 clouds for each of {len(layer_ids)} layers")


@pytest.mark.slow
def test_criterion_4_ordering_study(study_env):
    config = ExperimentConfig(
        experiment="ordering", seeds=STUDY_SEEDS,
        rates=[0.4, 0.5, 0.6, 0.7], pruner="l1",
        dataset=str(study_env["data"]), checkpoint_dir=str(study_env["ckpt"]),
        out_dir=str(study_env["root"] / "ordering"))
    t0 = time.time()
    rows = run_ordering_study(config)
    elapsed = time.time() - t0

    means = {}
    for rate in config.rates:
        means[rate] = {
            tag: float(np.mean([r.oa for r in rows
                                if r.rate == rate and r.plugin == tag]))
            for tag in ("ce", "random", "reverse")}
    ordered = all(means[r]["ce"] >= means[r]["random"] >= means[r]["reverse"]
                  for r in config.rates)
    margin = means[0.7]["ce"] - means[0.7]["reverse"]
    ok = ordered and margin >= 1.0 and elapsed < 1800
    detail = "; ".join(
        f"rate {r}: ce {means[r]['ce']:.1f} >= rnd {means[r]['random']:.1f} "
        f">= rev {means[r]['reverse']:.1f}" for r in config.rates)
    verdict("criterion 4 (ordering study)", ok,
            f"{detail}; margin@0.7 {margin:.1f} pts; {elapsed:.0f}s")
    assert ordered
    assert margin >= 1.0
    assert elapsed < 1800


@pytest.mark.slow
@pytest.mark.parametrize("pruner", ["l1", "rank", "chip"])
def test_criterion_5_ablation_direction(study_env, pruner):
    config = ExperimentConfig(
        experiment="ablation", seeds=STUDY_SEEDS, rates=[0.75, 0.90],
        pruner=pruner, dataset=str(study_env["data"]),
        checkpoint_dir=str(study_env["ckpt"]),
        out_dir=str(study_env["root"] / f"ablation_{pruner}"))
    rows = run_ablation(config)

    def cell(rate, plugin):
        return [r.oa for r in sorted(rows, key=lambda r: r.seed)
                if r.rate == rate and r.plugin == plugin]

    mean_ok = all(np.mean(cell(rate, "ce+kr")) >= np.mean(cell(rate, "none"))
                  for rate in (0.75, 0.90))
    wins = sum(c >= b for c, b in zip(cell(0.90, "ce+kr"), cell(0.90, "none")))
    ok = mean_ok and wins >= 4
    detail = (
        f"mean OA 0.75: cp3 {np.mean(cell(0.75, 'ce+kr')):.2f} vs "
        f"base {np.mean(cell(0.75, 'none')):.2f}; "
        f"0.90: cp3 {np.mean(cell(0.90, 'ce+kr')):.2f} vs "
        f"base {np.mean(cell(0.90, 'none')):.2f}; sign {wins}/5 at 0.90")
    verdict(f"criterion 5 (ablation, {pruner})", ok, detail)
    assert mean_ok
    assert wins >= 4


@pytest.mark.slow
def test_criterion_6_variance_reduction(study_env):
    config = ExperimentConfig(
        experiment="variance", seeds=STUDY_SEEDS, rates=[0.5],
        dataset=str(study_env["data"]), checkpoint_dir=str(study_env["ckpt"]),
        out_dir=str(study_env["root"] / "variance"))
    assert len(study_env["splits"]["score"]) >= 200
    summary = run_variance_study(config)
    fractions = {seed: summary["per_seed"][str(seed)]["fraction_lower"]
                 for seed in STUDY_SEEDS}
    ok = all(f is not None and f > 0.5 for f in fractions.values())
    verdict("criterion 6 (variance reduction)", ok,
            f"layer {summary['layer']}; fraction lower per seed "
            + ", ".join(f"{s}: {f:.3f}" for s, f in fractions.items()))
    assert ok


def test_criterion_7_compression_accounting(tmp_path):
    from pointprune.presets import default_network_spec

    spec = default_network_spec()
    widths = {lid: w for lid, w in zip(
        spec.mlp_layer_ids(), [w for b in spec.blocks for w in b.mlp_widths])}
    report = ImportanceReport(
        scores=[ChannelScore(lid, k, 0.0, 0.0, 0.0, float(k), 1)
                for lid in widths for k in range(widths[lid])],
        metadata={"report_id": "accounting", "num_samples": 1})
    plan = make_plan(report, rates=0.5)
    state = init_network(spec, seed=0)
    pruned, _ = rewrite(state, plan)

    base = count_flops(spec, 512)
    new = count_flops(pruned.spec, 512)
    interior = ["sa0.mlp1", "sa1.mlp1", "sa2.mlp1"]
    reductions = {
        lid: 100.0 * (1 - new.layers[lid].flops / base.layers[lid].flops)
        for lid in interior}
    interior_ok = all(abs(r - 75.0) <= 2.0 for r in reductions.values())

    rows = write_compression_report(base, new, tmp_path / "compression.csv")
    table_ok = True
    for row in rows:
        if row["layer"] == "total":
            recomputed = 100.0 * (1 - new.total_flops / base.total_flops)
        else:
            recomputed = 100.0 * (1 - new.layers[row["layer"]].flops
                                  / base.layers[row["layer"]].flops)
        table_ok &= row["flop_reduction_pct"] == recomputed
    ok = interior_ok and table_ok
    verdict("criterion 7 (compression accounting)", ok,
            "interior layer reductions "
            + ", ".join(f"{lid}: {r:.2f}%" for lid, r in reductions.items())
            + f"; table column recomputation exact: {table_ok}")
    assert interior_ok
    assert table_ok


@pytest.mark.slow
def test_criterion_8_determinism(study_env, tmp_path):
    config = ExperimentConfig(
        experiment="ordering", seeds=[0], rates=[0.5], pruner="l1",
        dataset=str(study_env["data"]), checkpoint_dir=str(study_env["ckpt"]),
        out_dir=str(tmp_path / "run_a"), finetune_epochs=2)
    config.to_json(tmp_path / "cfg.json")

    outputs = []
    for run_dir in ("run_a", "run_b"):
        proc = subprocess.run(
            [sys.executable, "-m", "pointprune.cli", "study", "ordering",
             "--config", str(tmp_path / "cfg.json"),
             "--out", str(tmp_path / run_dir)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append({
            "csv": (tmp_path / run_dir / "ordering.csv").read_bytes(),
            "summary": (tmp_path / run_dir / "ordering_summary.json").read_bytes(),
        })
    ok = outputs[0] == outputs[1]
    verdict("criterion 8 (determinism)", ok,
            "study ordering run twice through the CLI produced "
            f"byte-identical outputs: {ok}")
    assert ok


@pytest.mark.slow
def test_criterion_9_end_to_end_recovery(study_env):
    splits = study_env["splits"]
    ratios = {}
    for seed in STUDY_SEEDS:
        state = study_env["states"][seed]
        report = score_network(state, splits["score"], pruner="chip",
                               use_ce=True, use_kr=True)
        plan = make_plan(report, rates=0.5)
        pruned, _ = rewrite(state, plan)
        tuned, _ = finetune(pruned, splits["train"], epochs=20, seed=seed)
        oa = evaluate(tuned, splits["test"])["oa"]
        ratios[seed] = oa / study_env["baseline_oa"][seed]
    ok = all(r >= 0.95 for r in ratios.values())
    verdict("criterion 9 (end-to-end recovery)", ok,
            "post/baseline OA " + ", ".join(f"seed {s}: {r:.3f}"
                                            for s, r in ratios.items()))
    assert ok
