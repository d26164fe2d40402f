"""Miniature point classifier: stacked set-abstraction blocks + a max-pool head.

Each block samples centroids by farthest point sampling, gathers ball-query
neighborhoods, runs a shared per-neighbor MLP (affine + ReLU, implemented as
an affine over the flattened centroid x neighbor axis), and max-reduces over
neighbors. The head takes the global max over the final centroids' features
and applies a two-layer classifier. There is no batch normalization.

``forward`` can record per-block traces (sampled/discarded indices, per-layer
activations, reduced feature maps) for the importance-scoring machinery;
recording never changes the numerical results. Training is plain shuffled
minibatch Adam, deterministic for a given seed. During training the FPS start
index is drawn from the seeded RNG per sample; evaluation and scoring fix it
to 0 so importance estimates are reproducible.

Checkpoints are a ``<stem>.json`` manifest (format version, spec, ordered key
list, per-key element offsets) plus ``<stem>.bin``, a flat little-endian
float32 blob of all parameter tensors concatenated in manifest key order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .errors import (
    CheckpointError,
    CountError,
    InputError,
    StructuralError,
    TrainingError,
)
from .numerics import (
    Gradients,
    adam_init,
    adam_step,
    affine_backward,
    affine_forward,
    neighbor_max_reduce,
    neighbor_max_reduce_backward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .pointcloud import (
    PointCloud,
    SampleResult,
    ball_query_batch,
    fps_batch,
)

CHECKPOINT_FORMAT_VERSION = 1
TRAIN_LEARNING_RATE = 1e-2


@dataclass
class BlockSpec:
    centroids: int
    radius: float
    group_size: int
    mlp_widths: list[int]


@dataclass
class HeadSpec:
    hidden: int
    classes: int


@dataclass
class NetworkSpec:
    """Architecture description; parameter shapes derive entirely from this."""

    blocks: list[BlockSpec]
    head: HeadSpec
    input_feature_dim: int = 0

    def validate(self) -> None:
        if not self.blocks:
            raise StructuralError("spec has no blocks")
        prev = None
        for b, blk in enumerate(self.blocks):
            if blk.centroids < 1 or blk.group_size < 1 or blk.radius <= 0:
                raise StructuralError(f"block {b} has non-positive geometry fields")
            if not blk.mlp_widths or any(w < 1 for w in blk.mlp_widths):
                raise StructuralError(f"block {b} MLP widths must be positive")
            if prev is not None and blk.centroids > prev:
                raise StructuralError(
                    f"block {b} centroid count {blk.centroids} exceeds previous {prev}"
                )
            prev = blk.centroids
        if self.head.hidden < 1 or self.head.classes < 2:
            raise StructuralError("head needs hidden >= 1 and classes >= 2")
        if self.input_feature_dim < 0:
            raise StructuralError("input_feature_dim must be >= 0")

    def block_input_dim(self, b: int) -> int:
        """Feature width entering block b (before the +3 coordinate columns)."""
        if b == 0:
            return self.input_feature_dim
        return self.blocks[b - 1].mlp_widths[-1]

    def layer_dims(self, b: int) -> list[tuple[int, int]]:
        """(d_in, d_out) of every MLP layer in block b."""
        dims = []
        d_in = self.block_input_dim(b) + 3
        for w in self.blocks[b].mlp_widths:
            dims.append((d_in, w))
            d_in = w
        return dims

    def mlp_layer_ids(self) -> list[str]:
        return [
            f"sa{b}.mlp{j}"
            for b in range(len(self.blocks))
            for j in range(len(self.blocks[b].mlp_widths))
        ]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for b in range(len(self.blocks)):
            for j, (d_in, d_out) in enumerate(self.layer_dims(b)):
                shapes[f"sa{b}.mlp{j}.weight"] = (d_in, d_out)
                shapes[f"sa{b}.mlp{j}.bias"] = (d_out,)
        c_last = self.blocks[-1].mlp_widths[-1]
        shapes["head.fc1.weight"] = (c_last, self.head.hidden)
        shapes["head.fc1.bias"] = (self.head.hidden,)
        shapes["head.fc2.weight"] = (self.head.hidden, self.head.classes)
        shapes["head.fc2.bias"] = (self.head.classes,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "centroids": blk.centroids,
                    "radius": blk.radius,
                    "group_size": blk.group_size,
                    "mlp_widths": list(blk.mlp_widths),
                }
                for blk in self.blocks
            ],
            "head": {"hidden": self.head.hidden, "classes": self.head.classes},
            "input_feature_dim": self.input_feature_dim,
        }

    @staticmethod
    def from_dict(data: dict) -> "NetworkSpec":
        spec = NetworkSpec(
            blocks=[
                BlockSpec(
                    centroids=int(blk["centroids"]),
                    radius=float(blk["radius"]),
                    group_size=int(blk["group_size"]),
                    mlp_widths=[int(w) for w in blk["mlp_widths"]],
                )
                for blk in data["blocks"]
            ],
            head=HeadSpec(hidden=int(data["head"]["hidden"]),
                          classes=int(data["head"]["classes"])),
            input_feature_dim=int(data.get("input_feature_dim", 0)),
        )
        spec.validate()
        return spec


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: dict[str, np.ndarray]


@dataclass
class LayerTrace:
    """Per-block, per-sample forward artifacts used by importance scoring."""

    block: int
    input_coords: np.ndarray          # [n, 3] points entering the block
    input_features: np.ndarray        # [n, c_in] (c_in may be 0)
    sample: SampleResult
    centroid_indices: np.ndarray      # [m] == sample.sampled
    centroid_coords: np.ndarray       # [m, 3]
    neighbor_indices: np.ndarray      # [m, g]
    activations: list[np.ndarray]     # per MLP layer, [m, g, c_j] after ReLU
    post_reduction: np.ndarray        # [m, c_last] = max over neighbors


@dataclass
class LayerCost:
    flops: int
    macs: int
    params: int


@dataclass
class FlopsReport:
    layers: dict[str, LayerCost]
    total_flops: int
    total_params: int


def validate_state(state: NetworkState) -> None:
    """Raise StructuralError unless every spec-required key exists with its shape."""
    state.spec.validate()
    expected = state.spec.param_shapes()
    for key, shape in expected.items():
        if key not in state.params:
            raise StructuralError(f"missing parameter '{key}'")
        if tuple(state.params[key].shape) != shape:
            raise StructuralError(
                f"parameter '{key}' has shape {tuple(state.params[key].shape)}, "
                f"spec requires {shape}"
            )
    extra = set(state.params) - set(expected)
    if extra:
        raise StructuralError(f"unexpected parameters: {sorted(extra)}")


def clone_state(state: NetworkState) -> NetworkState:
    return NetworkState(state.spec, {k: v.copy() for k, v in state.params.items()})


def init_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """He-normal weights, zero biases, drawn in param_shapes key order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for key, shape in spec.param_shapes().items():
        if key.endswith(".weight"):
            scale = np.sqrt(2.0 / shape[0])
            params[key] = (rng.normal(0.0, scale, size=shape)).astype(np.float32)
        else:
            params[key] = np.zeros(shape, dtype=np.float32)
    return NetworkState(spec, params)


@njit(cache=True, parallel=True)
def _scatter_add_features(nbr_idx, d_grouped, out):  # pragma: no cover
    batch, m, g = nbr_idx.shape
    c = d_grouped.shape[3]
    for b in prange(batch):
        for q in range(m):
            for j in range(g):
                i = nbr_idx[b, q, j]
                for ch in range(c):
                    out[b, i, ch] += d_grouped[b, q, j, ch]


def _batch_gather(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """values [B, n, c], indices [B, ...] -> [B, ..., c]."""
    batch, n = values.shape[0], values.shape[1]
    flat = values.reshape(batch * n, -1)
    offsets = (np.arange(batch, dtype=np.int64) * n).reshape(
        (batch,) + (1,) * (indices.ndim - 1)
    )
    return flat[indices + offsets]


@dataclass
class _BlockCache:
    neighbor_indices: np.ndarray
    layer_inputs: list[np.ndarray]    # input to each affine, flattened rows
    pre_activations: list[np.ndarray]
    argmax: np.ndarray                # [B*m, c_out]
    input_feature_dim: int
    input_points: int
    shape: tuple[int, int, int]       # (B, m, g)


@dataclass
class _HeadCache:
    pooled: np.ndarray
    pool_argmax: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    final_features_shape: tuple[int, int, int]


def _forward_batch(state: NetworkState, coords: np.ndarray,
                   features: np.ndarray | None, fps_starts: np.ndarray,
                   record: bool = False, keep_cache: bool = False):
    """Vectorized forward over a [B, n, 3] batch.

    Returns (logits [B, C], block_caches, head_cache, traces) where traces is
    a per-sample list of per-block LayerTrace (or None when record is off).
    ``fps_starts`` is either [B] (start of block 0; deeper blocks start at 0,
    the scoring/eval convention) or [B, num_blocks] (training draws all).
    """
    spec = state.spec
    batch, n, _ = coords.shape
    if n < spec.blocks[0].centroids:
        raise CountError(
            f"cloud has {n} points but the first block samples {spec.blocks[0].centroids}"
        )
    feats = features
    if feats is None:
        feats = np.zeros((batch, n, 0), dtype=np.float32)
    if feats.shape[2] != spec.input_feature_dim:
        raise StructuralError(
            f"input features have width {feats.shape[2]}, spec expects "
            f"{spec.input_feature_dim}"
        )
    if fps_starts.ndim == 1:
        starts = np.zeros((batch, len(spec.blocks)), dtype=np.int64)
        starts[:, 0] = fps_starts
    else:
        starts = fps_starts
    traces: list[list[LayerTrace]] | None = [[] for _ in range(batch)] if record else None
    caches: list[_BlockCache] = []

    cur_coords = coords
    cur_feats = feats
    for b, blk in enumerate(spec.blocks):
        m, g = blk.centroids, blk.group_size
        idx = fps_batch(cur_coords, m, np.ascontiguousarray(starts[:, b]))
        cent = _batch_gather(cur_coords, idx)
        nbr = ball_query_batch(cur_coords, idx, blk.radius, g)
        rel = _batch_gather(cur_coords, nbr) - cent[:, :, None, :]
        if cur_feats.shape[2] > 0:
            grouped = np.concatenate([_batch_gather(cur_feats, nbr), rel], axis=3)
        else:
            grouped = rel
        h = np.ascontiguousarray(grouped.reshape(batch * m * g, -1), dtype=np.float32)

        layer_inputs: list[np.ndarray] = []
        pre_acts: list[np.ndarray] = []
        acts: list[np.ndarray] = []
        for j in range(len(blk.mlp_widths)):
            w = state.params[f"sa{b}.mlp{j}.weight"]
            bias = state.params[f"sa{b}.mlp{j}.bias"]
            if keep_cache:
                layer_inputs.append(h)
            z = affine_forward(h, w, bias)
            if keep_cache:
                pre_acts.append(z)
            h = relu_forward(z)
            if record:
                acts.append(h.reshape(batch, m, g, -1))
        c_out = blk.mlp_widths[-1]
        post, arg = neighbor_max_reduce(h.reshape(batch * m, g, c_out))
        post = post.reshape(batch, m, c_out)

        if keep_cache:
            caches.append(_BlockCache(
                neighbor_indices=nbr,
                layer_inputs=layer_inputs,
                pre_activations=pre_acts,
                argmax=arg,
                input_feature_dim=cur_feats.shape[2],
                input_points=n if b == 0 else spec.blocks[b - 1].centroids,
                shape=(batch, m, g),
            ))
        if record:
            for s in range(batch):
                sampled = idx[s]
                mask = np.ones(cur_coords.shape[1], dtype=bool)
                mask[sampled] = False
                traces[s].append(LayerTrace(
                    block=b,
                    input_coords=cur_coords[s].copy(),
                    input_features=cur_feats[s].copy(),
                    sample=SampleResult(sampled=sampled.copy(),
                                        discarded=np.nonzero(mask)[0]),
                    centroid_indices=sampled.copy(),
                    centroid_coords=cent[s].copy(),
                    neighbor_indices=nbr[s].copy(),
                    activations=[a[s].copy() for a in acts],
                    post_reduction=post[s].copy(),
                ))
        cur_coords = cent
        cur_feats = post

    pooled, pool_arg = neighbor_max_reduce(cur_feats)
    z1 = affine_forward(pooled, state.params["head.fc1.weight"],
                        state.params["head.fc1.bias"])
    a1 = relu_forward(z1)
    logits = affine_forward(a1, state.params["head.fc2.weight"],
                            state.params["head.fc2.bias"])
    head = _HeadCache(pooled=pooled, pool_argmax=pool_arg, pre_activation=z1,
                      hidden=a1, final_features_shape=cur_feats.shape) if keep_cache else None
    return logits, caches, head, traces


def _backward_batch(state: NetworkState, caches: list[_BlockCache],
                    head: _HeadCache, d_logits: np.ndarray) -> Gradients:
    grads: Gradients = {}
    d_hidden, grads["head.fc2.weight"], grads["head.fc2.bias"] = affine_backward(
        head.hidden, state.params["head.fc2.weight"], d_logits)
    d_z1 = relu_backward(head.pre_activation, d_hidden)
    d_pooled, grads["head.fc1.weight"], grads["head.fc1.bias"] = affine_backward(
        head.pooled, state.params["head.fc1.weight"], d_z1)
    batch, m_last, c_last = head.final_features_shape
    d_feats = neighbor_max_reduce_backward(head.pool_argmax, m_last, d_pooled)

    for b in range(len(state.spec.blocks) - 1, -1, -1):
        cache = caches[b]
        batch, m, g = cache.shape
        c_out = state.spec.blocks[b].mlp_widths[-1]
        d_post = d_feats.reshape(batch * m, c_out)
        d_h = neighbor_max_reduce_backward(cache.argmax, g, d_post)
        d_h = d_h.reshape(batch * m * g, c_out)
        for j in range(len(state.spec.blocks[b].mlp_widths) - 1, -1, -1):
            d_z = relu_backward(cache.pre_activations[j], d_h)
            d_h, grads[f"sa{b}.mlp{j}.weight"], grads[f"sa{b}.mlp{j}.bias"] = (
                affine_backward(cache.layer_inputs[j],
                                state.params[f"sa{b}.mlp{j}.weight"], d_z))
        c_in = cache.input_feature_dim
        if b == 0 or c_in == 0:
            break
        d_grouped = np.ascontiguousarray(
            d_h.reshape(batch, m, g, -1)[:, :, :, :c_in])
        d_feats = np.zeros((batch, cache.input_points, c_in), dtype=np.float32)
        _scatter_add_features(cache.neighbor_indices, d_grouped, d_feats)
    return grads


def forward(state: NetworkState, cloud: PointCloud, record: bool = False,
            fps_start: int = 0):
    """Logits for one cloud, optionally with per-block traces.

    Trace capture is observation-only: record on/off returns bit-identical
    logits. The FPS start index defaults to 0 (the scoring/eval convention).
    """
    validate_state(state)
    coords = cloud.coords[None]
    feats = cloud.features[None] if cloud.features is not None else None
    logits, _, _, traces = _forward_batch(
        state, coords, feats, np.array([fps_start], dtype=np.int64), record=record)
    return logits[0], (traces[0] if record else None)


def train(state: NetworkState, dataset: list[PointCloud], epochs: int,
          batch_size: int = 32, seed: int = 0,
          learning_rate: float = TRAIN_LEARNING_RATE):
    """Seeded shuffled-minibatch Adam; returns (trained state, loss curve).

    The curve has one (epoch, mean loss, train accuracy) row per epoch.
    Deterministic given the seed; the input state is left untouched.
    """
    if not dataset:
        raise InputError("training dataset is empty")
    validate_state(state)
    n = dataset[0].num_points
    if any(c.num_points != n for c in dataset):
        raise InputError("all training clouds must have the same point count")
    coords = np.stack([c.coords for c in dataset])
    labels = np.array([c.label for c in dataset], dtype=np.int64)

    params = {k: v.copy() for k, v in state.params.items()}
    opt = adam_init(params, learning_rate)
    rng = np.random.default_rng(seed)
    num = len(dataset)
    start_bounds = [n] + [blk.centroids for blk in state.spec.blocks[:-1]]
    curve: list[tuple[int, float, float]] = []
    work = NetworkState(state.spec, params)
    for epoch in range(epochs):
        order = rng.permutation(num)
        total_loss = 0.0
        correct = 0
        for lo in range(0, num, batch_size):
            sel = order[lo:lo + batch_size]
            starts = np.stack(
                [rng.integers(0, bound, size=sel.size) for bound in start_bounds],
                axis=1).astype(np.int64)
            logits, caches, head, _ = _forward_batch(
                work, coords[sel], None, starts, keep_cache=True)
            loss, d_logits = softmax_cross_entropy(logits, labels[sel])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total_loss += loss * sel.size
            correct += int((logits.argmax(axis=1) == labels[sel]).sum())
            grads = _backward_batch(work, caches, head, d_logits)
            new_params, opt = adam_step(opt, work.params, grads)
            work = NetworkState(state.spec, new_params)
        curve.append((epoch, total_loss / num, correct / num))
    return work, curve


def evaluate(state: NetworkState, dataset: list[PointCloud],
             batch_size: int = 64) -> dict:
    """Overall accuracy (OA, percent), mean class accuracy (mAcc), per-class stats."""
    if not dataset:
        raise InputError("evaluation dataset is empty")
    validate_state(state)
    coords = np.stack([c.coords for c in dataset])
    labels = np.array([c.label for c in dataset], dtype=np.int64)
    classes = state.spec.head.classes
    hits = np.zeros(classes, dtype=np.int64)
    totals = np.zeros(classes, dtype=np.int64)
    for lo in range(0, len(dataset), batch_size):
        batch_coords = coords[lo:lo + batch_size]
        batch_labels = labels[lo:lo + batch_size]
        starts = np.zeros(batch_coords.shape[0], dtype=np.int64)
        logits, _, _, _ = _forward_batch(state, batch_coords, None, starts)
        pred = logits.argmax(axis=1)
        for cls in range(classes):
            sel = batch_labels == cls
            totals[cls] += int(sel.sum())
            hits[cls] += int((pred[sel] == cls).sum())
    present = totals > 0
    per_class = np.zeros(classes)
    per_class[present] = hits[present] / totals[present]
    oa = 100.0 * hits.sum() / totals.sum()
    macc = 100.0 * per_class[present].mean()
    return {
        "oa": float(oa),
        "macc": float(macc),
        "per_class": [float(100.0 * x) for x in per_class],
        "num_samples": int(totals.sum()),
    }


def save_checkpoint(state: NetworkState, stem) -> None:
    """Write ``<stem>.json`` + ``<stem>.bin``; format in the module docstring."""
    validate_state(state)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(state.params)
    offsets = {}
    cursor = 0
    for key in keys:
        size = int(state.params[key].size)
        offsets[key] = [cursor, size]
        cursor += size
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": state.spec.to_dict(),
        "keys": keys,
        "offsets": offsets,
        "total_floats": cursor,
    }
    with open(f"{stem}.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    blob = np.concatenate([state.params[k].reshape(-1) for k in keys]).astype("<f4")
    blob.tofile(f"{stem}.bin")


def load_checkpoint(stem) -> NetworkState:
    stem = Path(stem)
    with open(f"{stem}.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unknown checkpoint format version {manifest.get('format_version')}"
        )
    spec = NetworkSpec.from_dict(manifest["spec"])
    expected = spec.param_shapes()
    blob = np.fromfile(f"{stem}.bin", dtype="<f4")
    if blob.size != manifest["total_floats"]:
        raise CheckpointError(
            f"blob holds {blob.size} floats, manifest expects {manifest['total_floats']}"
        )
    params: dict[str, np.ndarray] = {}
    for key in manifest["keys"]:
        if key not in expected:
            raise CheckpointError(f"manifest key '{key}' is not part of the spec")
        start, size = manifest["offsets"][key]
        shape = expected[key]
        if size != int(np.prod(shape)):
            raise StructuralError(
                f"manifest key '{key}' holds {size} floats, spec shape {shape} "
                f"needs {int(np.prod(shape))}"
            )
        params[key] = np.ascontiguousarray(blob[start:start + size].reshape(shape))
    state = NetworkState(spec, params)
    validate_state(state)
    return state


def affine_flops(rows: int, d_in: int, d_out: int) -> int:
    """Cost convention for one affine layer: 2 FLOPs per multiply-accumulate
    plus one bias add per output element."""
    return 2 * rows * d_in * d_out + rows * d_out


def count_flops(spec: NetworkSpec, points_per_cloud: int) -> FlopsReport:
    """Closed-form per-forward cost accounting for one cloud.

    Affine layers follow the ``affine_flops`` convention; each ReLU and each
    element entering a max reduction costs 1 op. FPS and ball-query distance
    math are excluded (they are unaffected by channel pruning, which is also
    why the point count does not enter: SA layer rows are centroids * group
    size). MACs count rows * d_in * d_out only.
    """
    spec.validate()
    layers: dict[str, LayerCost] = {}
    for b, blk in enumerate(spec.blocks):
        rows = blk.centroids * blk.group_size
        for j, (d_in, d_out) in enumerate(spec.layer_dims(b)):
            layers[f"sa{b}.mlp{j}"] = LayerCost(
                flops=affine_flops(rows, d_in, d_out) + rows * d_out,  # + ReLU
                macs=rows * d_in * d_out,
                params=d_in * d_out + d_out)
        c_out = blk.mlp_widths[-1]
        layers[f"sa{b}.reduce"] = LayerCost(flops=rows * c_out, macs=0, params=0)
    c_last = spec.blocks[-1].mlp_widths[-1]
    m_last = spec.blocks[-1].centroids
    layers["head.pool"] = LayerCost(flops=m_last * c_last, macs=0, params=0)
    h = spec.head.hidden
    classes = spec.head.classes
    layers["head.fc1"] = LayerCost(
        flops=affine_flops(1, c_last, h) + h, macs=c_last * h,
        params=c_last * h + h)
    layers["head.fc2"] = LayerCost(
        flops=affine_flops(1, h, classes), macs=h * classes,
        params=h * classes + classes)
    return FlopsReport(
        layers=layers,
        total_flops=sum(c.flops for c in layers.values()),
        total_params=sum(c.params for c in layers.values()),
    )


def flops_reduction_percent(base: FlopsReport, pruned: FlopsReport) -> float:
    return 100.0 * (1.0 - pruned.total_flops / base.total_flops)
