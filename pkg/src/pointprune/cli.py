"""Command-line entry point.

Subcommands: gen-data, train, score, prune, finetune, eval, and
study {ordering,ablation,variance,layer-rates}. Successful runs exit 0;
any failure prints a machine-readable JSON object
{"error": <exception type>, "message": <text>} to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .importance import score_network
from .network import (
    count_flops,
    evaluate,
    flops_reduction_percent,
    init_network,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pointcloud import generate_dataset, load_dataset, save_dataset
from .presets import PRESETS, split_seeds
from .pruning import PruningPlan, finetune, make_plan, rewrite


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointprune",
        description="Channel pruning for point-based classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test/score splits")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="study")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--train-samples", type=int, default=None)
    p.add_argument("--test-samples", type=int, default=None)
    p.add_argument("--score-samples", type=int, default=None)

    p = sub.add_parser("train", help="train a baseline classifier")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="study")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("score", help="compute channel importance")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--pruner", choices=["l1", "rank", "chip"], default="chip")
    p.add_argument("--plugin", choices=sorted(harness.PLUGIN_FLAGS),
                   default="cp3")

    p = sub.add_parser("prune", help="score, plan, and rewrite a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--pruner", choices=["l1", "rank", "chip"], default="chip")
    p.add_argument("--plugin", choices=sorted(harness.PLUGIN_FLAGS),
                   default="cp3")
    p.add_argument("--report", type=str, default=None,
                   help="reuse a saved importance report (JSON)")

    p = sub.add_parser("finetune", help="fine-tune a pruned checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default="study")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("study", help="run an experiment driver")
    p.add_argument("kind", choices=["ordering", "ablation", "variance",
                                    "layer-rates"])
    p.add_argument("--config", type=str, default=None,
                   help="ExperimentConfig JSON (ordering/ablation/variance)")
    p.add_argument("--plan", type=str, default=None,
                   help="plan JSON (layer-rates)")
    p.add_argument("--out", type=str, default=None)
    return parser


def cmd_gen_data(args) -> None:
    spec_fn, recipe = PRESETS[args.preset]
    points = args.points or recipe.points_per_cloud
    counts = {
        "train": args.train_samples or recipe.train_samples,
        "test": args.test_samples or recipe.test_samples,
        "score": args.score_samples or recipe.score_samples,
    }
    seeds = split_seeds(args.seed)
    out = Path(args.out)
    for split, count in counts.items():
        clouds = generate_dataset(seeds[split], count, points)
        save_dataset(clouds, out / split, seed=seeds[split])
    print(json.dumps({"out": str(out), "points_per_cloud": points,
                      "counts": counts}))


def cmd_train(args) -> None:
    spec_fn, recipe = PRESETS[args.preset]
    clouds, _ = load_dataset(Path(args.dataset) / "train")
    state = init_network(spec_fn(), seed=args.seed)
    trained, curve = train(
        state, clouds,
        epochs=args.epochs or recipe.epochs,
        batch_size=args.batch or recipe.batch_size,
        seed=args.seed,
        learning_rate=args.lr or recipe.learning_rate)
    save_checkpoint(trained, args.out)
    with open(f"{args.out}_curve.csv", "w") as fh:
        fh.write("epoch,loss,accuracy\n")
        for epoch, loss, acc in curve:
            fh.write(f"{epoch},{loss:.6f},{acc:.6f}\n")
    print(json.dumps({"checkpoint": args.out,
                      "final_train_accuracy": round(curve[-1][2], 6)
                      if curve else None}))


def cmd_score(args) -> None:
    state = load_checkpoint(args.checkpoint)
    clouds, _ = load_dataset(Path(args.dataset) / "score")
    use_ce, use_kr = harness.PLUGIN_FLAGS[args.plugin]
    report = score_network(state, clouds, pruner=args.pruner,
                           use_ce=use_ce, use_kr=use_kr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(f"{out}.csv")
    report.to_json(f"{out}.json")
    print(json.dumps({"report": f"{out}.json",
                      "report_id": report.report_id}))


def cmd_prune(args) -> None:
    from .importance import ImportanceReport

    state = load_checkpoint(args.checkpoint)
    if args.report:
        report = ImportanceReport.from_json(args.report)
    else:
        clouds, _ = load_dataset(Path(args.dataset) / "score")
        use_ce, use_kr = harness.PLUGIN_FLAGS[args.plugin]
        report = score_network(state, clouds, pruner=args.pruner,
                               use_ce=use_ce, use_kr=use_kr)
    plan = make_plan(report, rates=args.rate)
    pruned, _ = rewrite(state, plan)
    save_checkpoint(pruned, args.out)
    plan.save(f"{args.out}_plan.json")
    base = count_flops(state.spec, 0)
    new = count_flops(pruned.spec, 0)
    print(json.dumps({
        "checkpoint": args.out,
        "plan": f"{args.out}_plan.json",
        "flops": new.total_flops,
        "params": new.total_params,
        "flop_reduction_pct": round(flops_reduction_percent(base, new), 4),
    }))


def cmd_finetune(args) -> None:
    _, recipe = PRESETS[args.preset]
    state = load_checkpoint(args.checkpoint)
    clouds, _ = load_dataset(Path(args.dataset) / "train")
    epochs = args.epochs if args.epochs is not None else recipe.finetune_epochs
    tuned, curve = finetune(state, clouds, epochs=epochs, seed=args.seed)
    save_checkpoint(tuned, args.out)
    print(json.dumps({"checkpoint": args.out,
                      "final_train_accuracy": round(curve[-1][2], 6)
                      if curve else None}))


def cmd_eval(args) -> None:
    state = load_checkpoint(args.checkpoint)
    clouds, _ = load_dataset(Path(args.dataset) / "test")
    metrics = evaluate(state, clouds)
    report = count_flops(state.spec, clouds[0].num_points)
    payload = {"oa": round(metrics["oa"], 4), "macc": round(metrics["macc"], 4),
               "params": report.total_params, "flops": report.total_flops}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps(payload))


def cmd_study(args) -> None:
    if args.kind == "layer-rates":
        if not args.plan:
            raise ValueError("study layer-rates needs --plan")
        out_csv = args.out or str(Path(args.plan).with_suffix(".rates.csv"))
        rows = harness.run_layer_rates_report(args.plan, out_csv)
        print(json.dumps({"rows": rows, "csv": out_csv}))
        return
    if not args.config:
        raise ValueError(f"study {args.kind} needs --config")
    config = harness.ExperimentConfig.from_json(args.config)
    if args.out:
        config.out_dir = args.out
    if config.experiment != args.kind:
        raise ValueError(
            f"config names experiment '{config.experiment}', not '{args.kind}'")
    if args.kind == "ordering":
        harness.run_ordering_study(config)
        print(json.dumps({"csv": str(Path(config.out_dir) / "ordering.csv")}))
    elif args.kind == "ablation":
        harness.run_ablation(config)
        print(json.dumps({"csv": str(Path(config.out_dir) / "ablation.csv")}))
    else:
        summary = harness.run_variance_study(config)
        print(json.dumps({"summary": summary}))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "study": cmd_study,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
