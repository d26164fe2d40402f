"""Synthetic labeled point clouds and the sampling/grouping geometry primitives.

Dataset determinism
-------------------
``generate_dataset(seed, num_samples, points_per_cloud)`` is fully determined
by its seed. The draw order is fixed and is part of the on-disk contract:

1. A SplitMix64 stream is started from ``seed``; its i-th output is the
   per-sample seed of sample i.
2. Sample i gets class ``i % 8`` (classes listed in ``SHAPE_CLASSES``), so
   labels are exactly balanced whenever ``num_samples`` divides by 8.
3. Per sample, a ``numpy.random.Generator(PCG64(sample_seed))`` performs, in
   order: (a) the class-specific shape-parameter draws, (b) the surface-point
   draws, (c) three uniforms for a random rotation (Shoemake quaternion
   method), (d) an [n, 3] normal draw for jitter with sigma = 0.01.
4. The jittered, rotated cloud is normalized: centroid moved to the origin,
   then scaled by the max point norm (so the max radius is 1).

File format (one pair of files per split, ``<stem>.json`` + ``<stem>.bin``):
the JSON manifest holds counts, the generator seed, class names, and the
label array; the .bin file is a flat little-endian float32 dump of all
coordinates in sample-major, point-major, xyz order
(sample 0 point 0 x, y, z, sample 0 point 1 x, ... sample 1 point 0 x, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from .errors import CountError, InputError

SHAPE_CLASSES = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane",
    "two_spheres",
    "line",
)

JITTER_SIGMA = 0.01
DATASET_FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, count: int) -> list[int]:
    """First ``count`` outputs of the SplitMix64 stream started at ``seed``."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


@dataclass
class PointCloud:
    """One sample: normalized [n, 3] coordinates, optional per-point features."""

    coords: np.ndarray
    features: np.ndarray | None
    label: int

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]


@dataclass
class SampleResult:
    """Partition of [0, n) into FPS-sampled and discarded point indices."""

    sampled: np.ndarray
    discarded: np.ndarray


@dataclass
class Grouping:
    """Ball-query neighborhoods and the assembled per-neighbor MLP input."""

    neighbor_indices: np.ndarray  # [m, g] indices into the queried point set
    grouped_input: np.ndarray     # [m, g, c + 3], last 3 columns are x_j - x_i


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _shape_sphere(rng, n):
    radius = rng.uniform(0.6, 1.0)
    return _unit_vectors(rng, n) * radius


def _shape_cube(rng, n):
    half = rng.uniform(0.5, 0.9)
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _shape_cylinder(rng, n):
    radius = rng.uniform(0.35, 0.55)
    height = rng.uniform(1.3, 1.8)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-height / 2, height / 2, size=n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _shape_cone(rng, n):
    radius = rng.uniform(0.5, 0.75)
    height = rng.uniform(1.0, 1.4)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    # sqrt draw makes the density uniform over the lateral surface
    frac = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    r = radius * frac
    z = height * (1.0 - frac) - height / 2
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _shape_torus(rng, n):
    major = rng.uniform(0.65, 0.9)
    minor = rng.uniform(0.15, 0.25)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = major + minor * np.cos(phi)
    return np.stack(
        [ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1
    )


def _shape_plane(rng, n):
    half = rng.uniform(0.7, 1.0)
    xy = rng.uniform(-half, half, size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def _shape_two_spheres(rng, n):
    radius = rng.uniform(0.25, 0.4)
    separation = rng.uniform(0.5, 0.7)
    dirs = _unit_vectors(rng, n)
    pts = dirs * radius
    half = n // 2
    pts[:half, 0] += separation
    pts[half:, 0] -= separation
    return pts


def _shape_line(rng, n):
    length = rng.uniform(1.4, 2.0)
    x = rng.uniform(-length / 2, length / 2, size=n)
    pts = np.zeros((n, 3))
    pts[:, 0] = x
    return pts


_SHAPE_FNS = (
    _shape_sphere,
    _shape_cube,
    _shape_cylinder,
    _shape_cone,
    _shape_torus,
    _shape_plane,
    _shape_two_spheres,
    _shape_line,
)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation by a uniform random angle about the vertical (z) axis.

    The up-axis rotation is the standard augmentation for aligned shape
    datasets; it keeps the vertical coordinate meaningful across samples.
    One uniform draw.
    """
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def normalize_cloud(coords: np.ndarray) -> np.ndarray:
    """Center the cloud at its centroid and scale the max point norm to 1."""
    coords = np.asarray(coords, dtype=np.float64)
    centered = coords - coords.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered = centered / radius
    return np.ascontiguousarray(centered, dtype=np.float32)


def raw_sample(sample_seed: int, class_index: int, points_per_cloud: int) -> np.ndarray:
    """Rotated + jittered (but not yet normalized) float64 cloud of one sample."""
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    pts = _SHAPE_FNS[class_index](rng, points_per_cloud)
    rot = random_rotation(rng)
    pts = pts @ rot.T
    pts = pts + rng.normal(0.0, JITTER_SIGMA, size=pts.shape)
    return pts


def generate_dataset(seed: int, num_samples: int, points_per_cloud: int) -> list[PointCloud]:
    """Equal-frequency samples of the 8 parametric classes; see module docstring."""
    if points_per_cloud < 32:
        raise InputError(f"points_per_cloud must be >= 32, got {points_per_cloud}")
    sample_seeds = splitmix64(seed, num_samples)
    clouds = []
    for i in range(num_samples):
        label = i % len(SHAPE_CLASSES)
        pts = raw_sample(sample_seeds[i], label, points_per_cloud)
        clouds.append(PointCloud(normalize_cloud(pts), None, label))
    return clouds


@njit(cache=True, parallel=True)
def _fps_kernel(coords, starts, out_idx):  # pragma: no cover - via farthest_point_sample
    batch, n, _ = coords.shape
    m = out_idx.shape[1]
    for b in prange(batch):
        best = np.empty(n, np.float32)
        chosen = np.zeros(n, np.bool_)
        s0 = starts[b]
        out_idx[b, 0] = s0
        chosen[s0] = True
        for i in range(n):
            dx = coords[b, i, 0] - coords[b, s0, 0]
            dy = coords[b, i, 1] - coords[b, s0, 1]
            dz = coords[b, i, 2] - coords[b, s0, 2]
            best[i] = dx * dx + dy * dy + dz * dz
        for s in range(1, m):
            sel = -1
            bv = np.float32(-1.0)
            for i in range(n):
                if not chosen[i] and best[i] > bv:
                    bv = best[i]
                    sel = i
            out_idx[b, s] = sel
            chosen[sel] = True
            for i in range(n):
                dx = coords[b, i, 0] - coords[b, sel, 0]
                dy = coords[b, i, 1] - coords[b, sel, 1]
                dz = coords[b, i, 2] - coords[b, sel, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best[i]:
                    best[i] = d


def fps_batch(coords: np.ndarray, m: int, starts: np.ndarray) -> np.ndarray:
    """Farthest point sampling over a [B, n, 3] batch; returns [B, m] indices."""
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    batch, n, _ = coords.shape
    if not 1 <= m <= n:
        raise CountError(f"cannot sample {m} of {n} points")
    starts = np.asarray(starts, dtype=np.int64)
    if starts.min() < 0 or starts.max() >= n:
        raise CountError(f"start index out of range [0, {n})")
    out = np.empty((batch, m), dtype=np.int64)
    _fps_kernel(coords, starts, out)
    return out


def farthest_point_sample(coords: np.ndarray, m: int, start_index: int = 0) -> SampleResult:
    """Greedy max-min-distance sampling; ties break toward the smaller index.

    Distances are squared (monotone-equivalent, no square roots). The
    discarded indices are the complement in ascending order.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise InputError(f"coords must be [n, 3], got {coords.shape}")
    sampled = fps_batch(coords[None], m, np.array([start_index]))[0]
    mask = np.ones(coords.shape[0], dtype=bool)
    mask[sampled] = False
    return SampleResult(sampled=sampled, discarded=np.nonzero(mask)[0])


@njit(cache=True, parallel=True)
def _ball_query_kernel(coords, centroids, r2, g, out):  # pragma: no cover
    batch, n, _ = coords.shape
    m = centroids.shape[1]
    for b in prange(batch):
        for q in range(m):
            ci = centroids[b, q]
            cx = coords[b, ci, 0]
            cy = coords[b, ci, 1]
            cz = coords[b, ci, 2]
            count = 0
            for i in range(n):
                dx = coords[b, i, 0] - cx
                dy = coords[b, i, 1] - cy
                dz = coords[b, i, 2] - cz
                if dx * dx + dy * dy + dz * dz <= r2:
                    out[b, q, count] = i
                    count += 1
                    if count == g:
                        break
            if count == 0:
                fill = ci
            else:
                fill = out[b, q, 0]
            for j in range(count, g):
                out[b, q, j] = fill


def ball_query_batch(coords: np.ndarray, centroid_indices: np.ndarray,
                     radius: float, g: int) -> np.ndarray:
    """Neighbor indices [B, m, g] of the first g in-radius points per centroid."""
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    centroid_indices = np.ascontiguousarray(centroid_indices, dtype=np.int64)
    out = np.empty(centroid_indices.shape + (g,), dtype=np.int64)
    r2 = np.float32(radius) * np.float32(radius)
    _ball_query_kernel(coords, centroid_indices, r2, g, out)
    return out


def group_inputs(coords: np.ndarray, features: np.ndarray | None,
                 centroid_indices: np.ndarray, neighbor_indices: np.ndarray) -> np.ndarray:
    """Assemble [m, g, c + 3] grouped input: [features_j ; x_j - x_i]."""
    rel = coords[neighbor_indices] - coords[centroid_indices][:, None, :]
    if features is None or features.shape[1] == 0:
        return np.ascontiguousarray(rel, dtype=np.float32)
    grouped = np.concatenate([features[neighbor_indices], rel], axis=2)
    return np.ascontiguousarray(grouped, dtype=np.float32)


def ball_query_group(coords: np.ndarray, features: np.ndarray | None,
                     centroid_indices, radius: float, g: int) -> Grouping:
    """Up to g in-radius neighbors per centroid, in ascending index order.

    Neighborhoods with fewer than g in-radius points repeat the first found
    index (or the centroid itself if none) to keep the tensor shape static.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    if coords.ndim != 2 or coords.shape[0] == 0:
        raise InputError(f"empty or malformed point set: shape {coords.shape}")
    if radius <= 0:
        raise InputError(f"radius must be positive, got {radius}")
    if g < 1:
        raise InputError(f"group size must be >= 1, got {g}")
    centroid_indices = np.asarray(centroid_indices, dtype=np.int64)
    neighbor_indices = ball_query_batch(coords[None], centroid_indices[None], radius, g)[0]
    grouped = group_inputs(coords, features, centroid_indices, neighbor_indices)
    return Grouping(neighbor_indices=neighbor_indices, grouped_input=grouped)


def save_dataset(clouds: list[PointCloud], stem, seed: int | None = None) -> None:
    """Write ``<stem>.json`` + ``<stem>.bin``; layout in the module docstring."""
    if not clouds:
        raise InputError("cannot save an empty dataset")
    stem = Path(stem)
    n = clouds[0].num_points
    if any(c.num_points != n for c in clouds):
        raise InputError("all clouds in a split must have the same point count")
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_samples": len(clouds),
        "points_per_cloud": n,
        "seed": seed,
        "class_names": list(SHAPE_CLASSES),
        "labels": [int(c.label) for c in clouds],
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{stem}.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    blob = np.concatenate([c.coords.reshape(-1) for c in clouds]).astype("<f4")
    blob.tofile(f"{stem}.bin")


def load_dataset(stem) -> tuple[list[PointCloud], dict]:
    """Read a dataset split written by save_dataset; returns (clouds, manifest)."""
    stem = Path(stem)
    with open(f"{stem}.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise InputError(
            f"unknown dataset format version {manifest.get('format_version')}"
        )
    num = manifest["num_samples"]
    n = manifest["points_per_cloud"]
    blob = np.fromfile(f"{stem}.bin", dtype="<f4")
    if blob.size != num * n * 3:
        raise InputError(
            f"coordinate blob holds {blob.size} floats, expected {num * n * 3}"
        )
    coords = blob.reshape(num, n, 3)
    labels = manifest["labels"]
    if len(labels) != num:
        raise InputError(f"{len(labels)} labels for {num} samples")
    clouds = [
        PointCloud(np.ascontiguousarray(coords[i]), None, int(labels[i]))
        for i in range(num)
    ]
    return clouds, manifest
