"""Point clouds, neighbour search, sampling and the synthetic shape dataset."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

from .kernels import NeighborGraph


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pos.shape[0]:
                raise ValueError(f"features must be N x C with N={pos.shape[0]}, got {feats.shape}")
            if not np.isfinite(feats).all():
                raise ValueError("features must be finite")
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_features(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def node_inputs(self) -> np.ndarray:
        """First-layer node representation: features (if any) then position."""
        if self.features is None:
            return self.positions
        return np.concatenate([self.features, self.positions], axis=1)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.positions[idx], feats, self.label)

    def with_positions(self, positions) -> "PointCloud":
        return replace(self, positions=positions)


def _squared_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    sq = diff * diff
    return (sq[..., 0] + sq[..., 1]) + sq[..., 2]


def _positions(cloud) -> np.ndarray:
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def knn_graph(cloud, k: int) -> NeighborGraph:
    """Exact k-nearest-neighbour graph, self excluded, ties to the lower index.

    Row ``i`` holds the ``k`` sources closest to target ``i``, listed in
    increasing index order.
    """
    P = _positions(cloud)
    n = P.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    d2 = _squared_distances(P, P)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    offsets = np.arange(n + 1, dtype=np.int64) * k
    return NeighborGraph(offsets, order.reshape(-1), n)


def radius_graph(cloud, r: float, cap: int, centers=None) -> NeighborGraph:
    """Neighbours within distance ``r`` (self excluded), at most ``cap`` nearest.

    With ``centers`` (indices into the cloud) the graph is bipartite: targets
    are the centres, sources all points.  A target with no neighbour in range
    receives a self-loop.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if cap < 1:
        raise ValueError("cap must be at least 1")
    P = _positions(cloud)
    n = P.shape[0]
    centers = np.arange(n) if centers is None else np.asarray(centers, dtype=np.int64)
    d2 = _squared_distances(P[centers], P)
    d2[np.arange(len(centers)), centers] = np.inf
    rows = []
    r2 = r * r
    for i, c in enumerate(centers):
        inside = np.flatnonzero(d2[i] <= r2)
        if len(inside) == 0:
            rows.append(np.array([c]))
            continue
        if len(inside) > cap:
            inside = inside[np.argsort(d2[i, inside], kind="stable")[:cap]]
        rows.append(np.sort(inside))
    return NeighborGraph.from_rows(rows, n)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices beginning at ``start``."""
    P = _positions(cloud)
    n = P.shape[0]
    if m > n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    diff = P - P[start]
    best = (diff[:, 0] ** 2 + diff[:, 1] ** 2) + diff[:, 2] ** 2
    for t in range(1, m):
        nxt = int(np.argmax(best))
        chosen[t] = nxt
        diff = P - P[nxt]
        np.minimum(best, (diff[:, 0] ** 2 + diff[:, 1] ** 2) + diff[:, 2] ** 2, out=best)
    return chosen


def drop_points(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Keep a uniform random subset of ``(1 - fraction) * N`` points."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    n = len(cloud)
    keep = int(round(n * (1 - fraction)))
    if keep < 8:
        raise ValueError(f"dropping {fraction:.0%} of {n} points leaves {keep} (< 8)")
    if keep == n:
        return cloud
    idx = np.sort(np.random.default_rng(seed).choice(n, keep, replace=False))
    return cloud.subset(idx)


# -- synthetic shapes --------------------------------------------------------


class ShapeKind(str, Enum):
    SPHERE = "sphere"
    CUBE = "cube-surface"
    CYLINDER = "cylinder"
    CONE = "cone"
    TORUS = "torus"
    PYRAMID = "pyramid"
    HELIX = "helix"
    BLOB = "gaussian-blob"


SHAPES = tuple(ShapeKind)


def _sphere(rng, n, _v):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n, v):
    half = 1.0 + v * rng.uniform(-0.3, 0.3, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    face = rng.choice(6, n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(rng, n, v):
    radius = 1.0
    height = 2.0 * (1.0 + v * rng.uniform(-0.35, 0.35))
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(part == 1, height / 2, -height / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n, v):
    radius = 1.0
    height = 2.0 * (1.0 + v * rng.uniform(-0.35, 0.35))
    slant = np.hypot(radius, height)
    side = np.pi * radius * slant
    base = np.pi * radius ** 2
    on_side = rng.uniform(size=n) < side / (side + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    frac = np.sqrt(rng.uniform(0, 1, n))
    rad = radius * frac
    z = np.where(on_side, height * (1 - frac), 0.0)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    # the lateral surface has its centroid at height / 3, the base at 0
    pts[:, 2] -= side * height / 3 / (side + base)
    return pts


def _torus(rng, n, v):
    major = 1.0
    minor = 0.35 * (1.0 + v * rng.uniform(-0.3, 0.3))
    # rejection sampling keeps the surface density uniform
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * n
        u = rng.uniform(0, 2 * np.pi, m)
        w = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) < (major + minor * np.cos(w)) / (major + minor)
        u, w = u[keep], w[keep]
        ring = major + minor * np.cos(w)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(w)], 1)])
    return out[:n]


def _triangle(rng, a, b, c, n):
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def _pyramid(rng, n, v):
    height = 1.6 * (1.0 + v * rng.uniform(-0.35, 0.35))
    corners = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)
    apex = np.array([0.0, 0.0, height])
    tris = [(corners[i], corners[(i + 1) % 4], apex) for i in range(4)]
    tris += [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
    areas = np.array([0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris])
    which = rng.choice(len(tris), n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for t, (a, b, c) in enumerate(tris):
        sel = which == t
        pts[sel] = _triangle(rng, a, b, c, int(sel.sum()))
    # each side face has its centroid at height / 3, the base at 0
    pts[:, 2] -= areas[:4].sum() * height / 3 / areas.sum()
    return pts


def _helix(rng, n, v):
    turns = 2.5 * (1.0 + v * rng.uniform(-0.3, 0.3))
    pitch = 0.6
    tube = 0.15
    t = rng.uniform(0, 2 * np.pi * turns, n)
    span = 2 * np.pi * turns
    centre = np.stack([np.cos(t), np.sin(t), pitch * t / (2 * np.pi)], axis=1)
    # subtract the mean of the curve over the sampled parameter range
    centre -= [np.sin(span) / span, (1 - np.cos(span)) / span, pitch * turns / 2]
    return centre + tube * _sphere(rng, n, 0) * rng.uniform(0, 1, (n, 1)) ** (1 / 3)


def _blob(rng, n, v):
    scale = 1.0 + v * rng.uniform(-0.3, 0.3, size=3)
    return rng.normal(size=(n, 3)) * scale


_GENERATORS = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.CUBE: _cube,
    ShapeKind.CYLINDER: _cylinder,
    ShapeKind.CONE: _cone,
    ShapeKind.TORUS: _torus,
    ShapeKind.PYRAMID: _pyramid,
    ShapeKind.HELIX: _helix,
    ShapeKind.BLOB: _blob,
}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def synth_shape(kind, n: int, seed: int, noise: float = 0.0, variation: float = 1.0,
                label: int | None = None) -> PointCloud:
    """Sample ``n`` points from a randomly rotated unit-scale shape.

    Shapes are generated with the centroid of their underlying surface (or
    volume) at the origin, scaled so the farthest sample lies
    at radius 1, rotated uniformly at random and then jittered with isotropic
    Gaussian noise of standard deviation ``noise``.  ``variation`` scales the
    per-instance randomisation of shape proportions (0 gives canonical shapes).
    """
    kind = ShapeKind(kind)
    if n < 8:
        raise ValueError("synth_shape needs n >= 8")
    rng = np.random.default_rng([int(seed), SHAPES.index(kind)])
    pts = _GENERATORS[kind](rng, n, variation)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    pts = pts @ random_rotation(rng).T
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return PointCloud(pts, None, label)


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 8
    train_per_class: int = 200
    test_per_class: int = 50
    points: int = 128
    noise: float = 0.04
    variation: float = 1.0


def make_dataset(spec: DatasetSpec, seed: int) -> tuple[list[PointCloud], list[PointCloud]]:
    """Balanced train/test split of synthetic shapes (first ``classes`` kinds)."""
    if not 1 <= spec.classes <= len(SHAPES):
        raise ValueError(f"classes must be in 1..{len(SHAPES)}")
    rng = substream(seed, "dataset")
    total = spec.train_per_class + spec.test_per_class
    seeds = rng.integers(0, 2 ** 62, size=(spec.classes, total))
    train, test = [], []
    for c in range(spec.classes):
        for i in range(total):
            cloud = synth_shape(SHAPES[c], spec.points, int(seeds[c, i]), spec.noise,
                                spec.variation, label=c)
            (train if i < spec.train_per_class else test).append(cloud)
    return train, test


def radial_stats(cloud) -> np.ndarray:
    """Rotation-invariant summary: mean, stdev and 10/50/90% quantiles of point radii."""
    P = _positions(cloud)
    r = np.linalg.norm(P - P.mean(axis=0), axis=1)
    return np.array([r.mean(), r.std(), *np.quantile(r, [0.1, 0.5, 0.9])])


def nearest_centroid_accuracy(train, test) -> float:
    """Accuracy of a nearest-class-centroid rule on :func:`radial_stats` features."""
    Xtr = np.array([radial_stats(c) for c in train])
    ytr = np.array([c.label for c in train])
    Xte = np.array([radial_stats(c) for c in test])
    yte = np.array([c.label for c in test])
    classes = np.unique(ytr)
    cents = np.array([Xtr[ytr == c].mean(axis=0) for c in classes])
    d = ((Xte[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((classes[d.argmin(axis=1)] == yte).mean())
