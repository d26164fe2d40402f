"""Channel-importance scoring: base metrics plus the two coordinate plug-ins.

Three base metrics rank channels the way established structured pruners do:
``l1`` (weight-column L1 norm), ``rank`` (mean numerical rank of the
per-channel centroid x neighbor activation matrix), and ``chip`` (nuclear-norm
drop of the stacked reduced feature maps when the channel's row is zeroed).

On top of any base metric sit two plug-in scores:

* The coordinate score of a channel is the absolute Pearson correlation
  between its reduced feature map and each centroid coordinate axis, taking
  the maximum over the three axes, then the mean over scoring samples.
  (Estimator choices made here: Pearson, axis-max, sample-mean. A channel or
  axis with zero variance gets correlation 0 - a constant channel carries no
  coordinate information.)
* The recycling score repeats that computation on the points a block's
  farthest-point sampling discarded: the discarded centroids are grouped
  against the block's input point set with the block's own radius and group
  size, pushed through the block's trained MLP stack, reduced, and correlated
  with the discarded coordinates. Samples with fewer than two discarded
  points contribute nothing; if no sample contributes, the layer's recycling
  scores are zero and flagged inactive. Scoring is observation-only: network
  state and traces are never modified.

The combined criterion min-max normalizes the base scores within each layer
(constant vectors map to 0.5) and adds the two plug-in scores, both already
in [0, 1], so no term dominates by units. Scoring runs in float64.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    InsufficientPointsError,
    TraceError,
)
from .network import LayerTrace, NetworkState, validate_state
from .pointcloud import PointCloud, ball_query_group
from .numerics import affine_forward, relu_forward

BASE_PRUNERS = ("l1", "rank", "chip")
RANK_TOLERANCE = 1e-5


@dataclass
class ChannelScore:
    layer: str
    channel: int
    base: float
    ce: float
    kr: float
    combined: float
    num_samples_used: int


@dataclass
class ImportanceReport:
    scores: list[ChannelScore]
    metadata: dict

    @property
    def report_id(self) -> str:
        return self.metadata.get("report_id", "unknown")

    def layers(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.scores:
            seen.setdefault(s.layer, None)
        return list(seen)

    def vector(self, layer: str, field_name: str = "combined") -> np.ndarray:
        rows = sorted(
            (s for s in self.scores if s.layer == layer), key=lambda s: s.channel)
        return np.array([getattr(s, field_name) for s in rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "channel", "base", "ce", "kr", "combined"])
            for s in self.scores:
                writer.writerow([s.layer, s.channel, f"{s.base:.10g}",
                                 f"{s.ce:.10g}", f"{s.kr:.10g}",
                                 f"{s.combined:.10g}"])

    def to_json(self, path) -> None:
        payload = {
            "metadata": self.metadata,
            "scores": [vars(s) for s in self.scores],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(path) -> "ImportanceReport":
        with open(path) as fh:
            payload = json.load(fh)
        return ImportanceReport(
            scores=[ChannelScore(**row) for row in payload["scores"]],
            metadata=payload["metadata"],
        )


def _parse_layer(layer: str) -> tuple[int, int]:
    try:
        block_part, mlp_part = layer.split(".")
        return int(block_part.removeprefix("sa")), int(mlp_part.removeprefix("mlp"))
    except (ValueError, AttributeError):
        raise DimensionError(f"not an SA MLP layer id: '{layer}'") from None


def ce_score(feature_map: np.ndarray, centroid_coords: np.ndarray) -> np.ndarray:
    """Per-channel max-over-axes absolute Pearson correlation, for one sample."""
    f = np.asarray(feature_map, dtype=np.float64)
    x = np.asarray(centroid_coords, dtype=np.float64)
    if f.ndim != 2 or x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError(
            f"ce_score expects [m, c] features and [m, 3] coords, got "
            f"{f.shape} and {x.shape}")
    if f.shape[0] != x.shape[0]:
        raise DimensionError(
            f"{f.shape[0]} feature rows vs {x.shape[0]} coordinate rows")
    m = f.shape[0]
    if m < 2:
        raise InsufficientPointsError(
            f"correlation needs at least 2 points, got {m}")
    fc = f - f.mean(axis=0)
    xc = x - x.mean(axis=0)
    f_ss = (fc * fc).sum(axis=0)
    x_ss = (xc * xc).sum(axis=0)
    cross = np.abs(fc.T @ xc)                      # [c, 3]
    denom = np.sqrt(np.outer(f_ss, x_ss))
    corr = np.zeros_like(cross)
    valid = denom > 0
    corr[valid] = cross[valid] / denom[valid]
    return corr.max(axis=1)


def _reduced_map(trace: LayerTrace, mlp_index: int) -> np.ndarray:
    """[m, c] max-over-neighbors view of one MLP layer's activations."""
    return trace.activations[mlp_index].max(axis=1)


def _run_block_reduced(state: NetworkState, block: int,
                       grouped: np.ndarray) -> list[np.ndarray]:
    """Run block ``block``'s MLP stack on [m, g, c+3] input; reduced map per layer."""
    m, g, _ = grouped.shape
    h = np.ascontiguousarray(grouped.reshape(m * g, -1), dtype=np.float32)
    reduced = []
    for j in range(len(state.spec.blocks[block].mlp_widths)):
        h = relu_forward(affine_forward(
            h, state.params[f"sa{block}.mlp{j}.weight"],
            state.params[f"sa{block}.mlp{j}.bias"]))
        reduced.append(h.reshape(m, g, -1).max(axis=1))
    return reduced


def kr_sample_scores(state: NetworkState, trace: LayerTrace,
                     block: int) -> dict[int, np.ndarray] | None:
    """Recycling scores of one sample for every MLP layer of one block.

    Returns None when the sample has fewer than 2 discarded points.
    """
    if trace.sample is None or trace.sample.discarded is None:
        raise TraceError(f"trace for block {block} has no discarded indices")
    discarded = trace.sample.discarded
    if discarded.size < 2:
        return None
    blk = state.spec.blocks[block]
    features = trace.input_features if trace.input_features.shape[1] > 0 else None
    grouping = ball_query_group(trace.input_coords, features, discarded,
                                blk.radius, blk.group_size)
    reduced = _run_block_reduced(state, block, grouping.grouped_input)
    x_dis = trace.input_coords[discarded]
    return {j: ce_score(r, x_dis) for j, r in enumerate(reduced)}


@dataclass
class KRResult:
    scores: dict[str, np.ndarray]   # layer id -> per-channel mean scores
    active: bool
    contributing_samples: int


def kr_score(state: NetworkState, traces: list[list[LayerTrace]],
             block: int) -> KRResult:
    """Mean recycling score over samples for every MLP layer of one block."""
    validate_state(state)
    widths = state.spec.blocks[block].mlp_widths
    sums = {j: np.zeros(w, dtype=np.float64) for j, w in enumerate(widths)}
    contributing = 0
    for sample_traces in traces:
        per_layer = kr_sample_scores(state, sample_traces[block], block)
        if per_layer is None:
            continue
        contributing += 1
        for j, vec in per_layer.items():
            sums[j] += vec
    active = contributing > 0
    scores = {
        f"sa{block}.mlp{j}": (sums[j] / contributing if active
                              else np.zeros_like(sums[j]))
        for j in sums
    }
    return KRResult(scores=scores, active=active,
                    contributing_samples=contributing)


def base_score_l1(state: NetworkState, layer: str) -> np.ndarray:
    """Sum of |w| over the weight column producing each output channel."""
    weight = state.params[f"{layer}.weight"]
    return np.abs(weight.astype(np.float64)).sum(axis=0)


def base_score_rank(traces: list[list[LayerTrace]], layer: str,
                    tolerance: float = RANK_TOLERANCE) -> np.ndarray:
    """Mean numerical rank of each channel's [m, g] activation matrix."""
    block, mlp_index = _parse_layer(layer)
    total = None
    for sample_traces in traces:
        acts = sample_traces[block].activations[mlp_index]
        m, g, c = acts.shape
        if m <= 0 or g <= 0:
            raise DimensionError(f"degenerate activation shape {acts.shape}")
        if total is None:
            total = np.zeros(c, dtype=np.float64)
        for k in range(c):
            total[k] += matrix_rank_tol(acts[:, :, k], tolerance)
    if total is None:
        raise TraceError("rank score needs at least one trace")
    return total / len(traces)


def matrix_rank_tol(matrix: np.ndarray, tolerance: float) -> int:
    """Singular values above tolerance * sigma_max, in float64."""
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > tolerance * s[0]).sum())


def base_score_chip(traces: list[list[LayerTrace]], layer: str) -> np.ndarray:
    """Nuclear-norm drop when one channel's stacked reduced map is zeroed.

    A larger drop means the channel is harder to express through the others,
    hence more important.
    """
    block, mlp_index = _parse_layer(layer)
    maps = [_reduced_map(tr[block], mlp_index).astype(np.float64)
            for tr in traces]
    return _chip_from_maps(maps)


def combined_score(base: np.ndarray, ce: np.ndarray, kr: np.ndarray,
                   layer: str, num_samples_used: int = 0) -> list[ChannelScore]:
    """Min-max normalize the base within the layer, then add the plug-ins."""
    base = np.asarray(base, dtype=np.float64)
    ce = np.asarray(ce, dtype=np.float64)
    kr = np.asarray(kr, dtype=np.float64)
    if not (base.shape == ce.shape == kr.shape) or base.ndim != 1:
        raise DimensionError(
            f"score vectors differ in length: base {base.shape}, "
            f"ce {ce.shape}, kr {kr.shape}")
    spread = base.max() - base.min()
    if spread > 0:
        base_norm = (base - base.min()) / spread
    else:
        base_norm = np.full_like(base, 0.5)
    combined = base_norm + ce + kr
    return [
        ChannelScore(layer=layer, channel=k, base=float(base[k]),
                     ce=float(ce[k]), kr=float(kr[k]),
                     combined=float(combined[k]),
                     num_samples_used=num_samples_used)
        for k in range(base.size)
    ]


def score_network(state: NetworkState, clouds: list[PointCloud],
                  pruner: str = "chip", use_ce: bool = True,
                  use_kr: bool = True, metadata: dict | None = None) -> ImportanceReport:
    """Score every SA MLP channel over a scoring split (FPS start fixed at 0).

    ``pruner`` picks the base metric ("l1", "rank", "chip", or "none" for a
    constant base so the ranking reduces to the plug-ins alone).
    """
    from .network import forward  # local import to avoid cycle at module load

    if pruner not in BASE_PRUNERS + ("none",):
        raise ValueError(f"unknown pruner '{pruner}'")
    if not clouds:
        raise TraceError("scoring split is empty")
    validate_state(state)
    spec = state.spec
    num_blocks = len(spec.blocks)
    layer_ids = spec.mlp_layer_ids()

    ce_sums = {lid: np.zeros(w, dtype=np.float64)
               for lid, w in zip(layer_ids, _layer_widths(spec))}
    kr_sums = {lid: np.zeros_like(v) for lid, v in ce_sums.items()}
    kr_counts = {b: 0 for b in range(num_blocks)}
    rank_sums = {lid: np.zeros_like(v) for lid, v in ce_sums.items()}
    chip_maps: dict[str, list[np.ndarray]] = {lid: [] for lid in layer_ids}

    for cloud in clouds:
        _, traces = forward(state, cloud, record=True, fps_start=0)
        for b in range(num_blocks):
            trace = traces[b]
            for j in range(len(spec.blocks[b].mlp_widths)):
                lid = f"sa{b}.mlp{j}"
                reduced = _reduced_map(trace, j)
                if use_ce:
                    ce_sums[lid] += ce_score(reduced, trace.centroid_coords)
                if pruner == "rank":
                    for k in range(reduced.shape[1]):
                        rank_sums[lid][k] += matrix_rank_tol(
                            trace.activations[j][:, :, k], RANK_TOLERANCE)
                if pruner == "chip":
                    chip_maps[lid].append(reduced.astype(np.float64))
            if use_kr:
                per_layer = kr_sample_scores(state, trace, b)
                if per_layer is not None:
                    kr_counts[b] += 1
                    for j, vec in per_layer.items():
                        kr_sums[f"sa{b}.mlp{j}"] += vec

    num_samples = len(clouds)
    scores: list[ChannelScore] = []
    kr_active = {}
    for b in range(num_blocks):
        for j in range(len(spec.blocks[b].mlp_widths)):
            lid = f"sa{b}.mlp{j}"
            if pruner == "l1":
                base = base_score_l1(state, lid)
            elif pruner == "rank":
                base = rank_sums[lid] / num_samples
            elif pruner == "chip":
                base = _chip_from_maps(chip_maps[lid])
            else:
                base = np.zeros_like(ce_sums[lid])
            ce = ce_sums[lid] / num_samples if use_ce else np.zeros_like(ce_sums[lid])
            if use_kr and kr_counts[b] > 0:
                kr = kr_sums[lid] / kr_counts[b]
                kr_active[lid] = True
            else:
                kr = np.zeros_like(ce_sums[lid])
                kr_active[lid] = False
            scores.extend(combined_score(base, ce, kr, lid,
                                         num_samples_used=num_samples))

    meta = {
        "pruner": pruner,
        "use_ce": use_ce,
        "use_kr": use_kr,
        "num_samples": num_samples,
        "fps_start": 0,
        "kr_active": kr_active,
        "kr_contributing": {f"sa{b}": kr_counts[b] for b in kr_counts},
    }
    if metadata:
        meta.update(metadata)
    meta["report_id"] = (
        f"{pruner}|ce={int(use_ce)}|kr={int(use_kr)}|samples={num_samples}")
    return ImportanceReport(scores=scores, metadata=meta)


def per_sample_layer_scores(state: NetworkState, clouds: list[PointCloud],
                            layer: str):
    """Per-sample CE and KR score matrices for one layer (variance studies).

    Returns (ce_matrix [S, c], kr_matrix [S, c]); kr rows are NaN for samples
    where recycling was inactive (fewer than 2 discarded points).
    """
    from .network import forward

    block, mlp_index = _parse_layer(layer)
    width = state.spec.blocks[block].mlp_widths[mlp_index]
    ce_rows = np.zeros((len(clouds), width))
    kr_rows = np.full((len(clouds), width), np.nan)
    for s, cloud in enumerate(clouds):
        _, traces = forward(state, cloud, record=True, fps_start=0)
        trace = traces[block]
        ce_rows[s] = ce_score(_reduced_map(trace, mlp_index),
                              trace.centroid_coords)
        per_layer = kr_sample_scores(state, trace, block)
        if per_layer is not None:
            kr_rows[s] = per_layer[mlp_index]
    return ce_rows, kr_rows


def _layer_widths(spec) -> list[int]:
    return [w for blk in spec.blocks for w in blk.mlp_widths]


def _chip_from_maps(maps: list[np.ndarray]) -> np.ndarray:
    stacked = np.concatenate(maps, axis=0).T
    full = np.linalg.svd(stacked, compute_uv=False).sum()
    scores = np.empty(stacked.shape[0], dtype=np.float64)
    for k in range(stacked.shape[0]):
        rest = np.delete(stacked, k, axis=0)
        scores[k] = full - np.linalg.svd(rest, compute_uv=False).sum()
    return scores
