"""Turn an importance report into keep-masks, rewrite the network, fine-tune.

Selection keeps, per layer, the k highest combined scores where
k = max(1, round((1 - rate) * channels)); ties keep the smaller channel
index, and at least one channel always survives. The structural rewrite
drops the pruned output columns and the matching input rows of every
consumer (the next MLP layer, the next block's first layer, or the head),
with one hard rule: the three relative-coordinate input columns appended at
every block are structural and never pruned.

Plans serialize to JSON with each mask as a 0/1 string.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructuralError
from .importance import ImportanceReport
from .network import (
    BlockSpec,
    HeadSpec,
    NetworkSpec,
    NetworkState,
    TRAIN_LEARNING_RATE,
    train,
    validate_state,
)
from .pointcloud import PointCloud

PLAN_FORMAT_VERSION = 1
FINETUNE_LEARNING_RATE = 0.1 * TRAIN_LEARNING_RATE


@dataclass
class LayerPlan:
    mask: np.ndarray       # bool, 1 = kept
    kept: int


@dataclass
class PruningPlan:
    layers: dict[str, LayerPlan]
    mode: str
    rates: dict[str, float]
    report_id: str
    warnings: list[str] = field(default_factory=list)

    def save(self, path) -> None:
        payload = {
            "format_version": PLAN_FORMAT_VERSION,
            "mode": self.mode,
            "rates": self.rates,
            "report_id": self.report_id,
            "warnings": self.warnings,
            "layers": {
                lid: {"mask": "".join("1" if b else "0" for b in lp.mask),
                      "kept": lp.kept}
                for lid, lp in self.layers.items()
            },
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "PruningPlan":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format_version") != PLAN_FORMAT_VERSION:
            raise StructuralError(
                f"unknown plan format version {payload.get('format_version')}")
        layers = {}
        for lid, entry in payload["layers"].items():
            mask = np.array([ch == "1" for ch in entry["mask"]], dtype=bool)
            if int(mask.sum()) != entry["kept"]:
                raise StructuralError(
                    f"plan layer '{lid}': mask has {int(mask.sum())} kept "
                    f"channels but kept={entry['kept']}")
            layers[lid] = LayerPlan(mask=mask, kept=entry["kept"])
        return PruningPlan(layers=layers, mode=payload["mode"],
                           rates=payload["rates"],
                           report_id=payload["report_id"],
                           warnings=payload.get("warnings", []))


@dataclass
class RewriteMap:
    """Old-to-new channel indices per layer, surviving inputs per consumer."""

    channel_map: dict[str, dict[int, int]]
    consumer_inputs: dict[str, list[int]]


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest scores; ties keep the smaller index."""
    order = np.lexsort((np.arange(scores.size), -np.asarray(scores, np.float64)))
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def make_plan(report: ImportanceReport, mode: str = "uniform-rate",
              rates=0.5, order: str = "descending",
              seed: int | None = None) -> PruningPlan:
    """Keep the top-k combined scores per layer at the requested rate(s).

    ``mode`` is "uniform-rate" (one rate for every layer) or
    "per-layer-rates" (dict layer id -> rate). ``order`` defaults to the
    spec'd descending selection; "ascending" and "random" exist for the
    ordering studies (random needs a seed).
    """
    if mode not in ("uniform-rate", "per-layer-rates"):
        raise ValueError(f"unknown plan mode '{mode}'")
    if order not in ("descending", "ascending", "random"):
        raise ValueError(f"unknown selection order '{order}'")
    layer_ids = report.layers()
    if mode == "uniform-rate":
        rate_map = {lid: float(rates) for lid in layer_ids}
    else:
        rate_map = {lid: float(rates[lid]) for lid in layer_ids}
    for lid, rate in rate_map.items():
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"rate for '{lid}' must be in [0, 1), got {rate}")
    rng = np.random.default_rng(seed) if order == "random" else None

    layers: dict[str, LayerPlan] = {}
    notes: list[str] = []
    for lid in layer_ids:
        scores = report.vector(lid, "combined")
        if order == "ascending":
            scores = -scores
        elif order == "random":
            scores = rng.random(scores.size)
        c = scores.size
        raw_k = int(np.floor((1.0 - rate_map[lid]) * c + 0.5))
        k = max(1, raw_k)
        if raw_k == 0:
            note = f"layer '{lid}': rate {rate_map[lid]} keeps 0 of {c}, clamped to 1"
            notes.append(note)
            warnings.warn(note)
        mask = top_k_mask(scores, k)
        layers[lid] = LayerPlan(mask=mask, kept=k)
    return PruningPlan(layers=layers, mode=mode, rates=rate_map,
                       report_id=report.report_id, warnings=notes)


def rewrite(state: NetworkState, plan: PruningPlan):
    """Structurally remove pruned channels; returns (smaller state, RewriteMap).

    Exactness guarantee: pruning a channel whose consumer weight rows are all
    zero leaves the network function bit-identical (the forward kernels
    accumulate inputs sequentially, so zero-weight rows are bit-neutral).
    """
    validate_state(state)
    spec = state.spec
    expected = set(spec.mlp_layer_ids())
    if set(plan.layers) != expected:
        raise StructuralError(
            f"plan layers {sorted(plan.layers)} do not match spec layers "
            f"{sorted(expected)}")
    for lid in expected:
        width = state.params[f"{lid}.weight"].shape[1]
        if plan.layers[lid].mask.size != width:
            raise StructuralError(
                f"plan mask for '{lid}' has {plan.layers[lid].mask.size} "
                f"entries, layer has {width} channels")
        if plan.layers[lid].kept < 1:
            raise StructuralError(f"plan keeps no channels in '{lid}'")

    new_blocks = []
    new_params: dict[str, np.ndarray] = {}
    channel_map: dict[str, dict[int, int]] = {}
    consumer_inputs: dict[str, list[int]] = {}
    prev_out_mask = np.ones(spec.input_feature_dim, dtype=bool)
    for b, blk in enumerate(spec.blocks):
        new_widths = []
        in_mask = np.concatenate([prev_out_mask, np.ones(3, dtype=bool)])
        for j in range(len(blk.mlp_widths)):
            lid = f"sa{b}.mlp{j}"
            out_mask = plan.layers[lid].mask
            weight = state.params[f"{lid}.weight"]
            bias = state.params[f"{lid}.bias"]
            consumer_inputs[lid] = np.nonzero(in_mask)[0].tolist()
            new_params[f"{lid}.weight"] = np.ascontiguousarray(
                weight[np.ix_(in_mask, out_mask)])
            new_params[f"{lid}.bias"] = np.ascontiguousarray(bias[out_mask])
            kept_old = np.nonzero(out_mask)[0]
            channel_map[lid] = {int(old): new for new, old in enumerate(kept_old)}
            new_widths.append(int(out_mask.sum()))
            in_mask = out_mask
        new_blocks.append(BlockSpec(centroids=blk.centroids, radius=blk.radius,
                                    group_size=blk.group_size,
                                    mlp_widths=new_widths))
        prev_out_mask = in_mask
    # head consumes the last block's surviving channels; its own widths stay
    head_mask = prev_out_mask
    consumer_inputs["head.fc1"] = np.nonzero(head_mask)[0].tolist()
    new_params["head.fc1.weight"] = np.ascontiguousarray(
        state.params["head.fc1.weight"][head_mask, :])
    new_params["head.fc1.bias"] = state.params["head.fc1.bias"].copy()
    new_params["head.fc2.weight"] = state.params["head.fc2.weight"].copy()
    new_params["head.fc2.bias"] = state.params["head.fc2.bias"].copy()

    new_spec = NetworkSpec(blocks=new_blocks,
                           head=HeadSpec(hidden=spec.head.hidden,
                                         classes=spec.head.classes),
                           input_feature_dim=spec.input_feature_dim)
    new_state = NetworkState(new_spec, new_params)
    validate_state(new_state)
    return new_state, RewriteMap(channel_map=channel_map,
                                 consumer_inputs=consumer_inputs)


def finetune(state: NetworkState, dataset: list[PointCloud], epochs: int,
             seed: int = 0, batch_size: int = 32,
             learning_rate: float | None = None):
    """Brief retraining of a pruned network; same contract as ``train`` with
    a 10x lower default learning rate."""
    validate_state(state)
    lr = FINETUNE_LEARNING_RATE if learning_rate is None else learning_rate
    return train(state, dataset, epochs=epochs, batch_size=batch_size,
                 seed=seed, learning_rate=lr)
