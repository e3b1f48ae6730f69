"""Classification backbones assembled from graph blocks, plus experiment presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import PointCloud, knn_graph, substream
from .kernels import NeighborGraph, segment_max_op, segment_mean_op
from .layers import Layer, LayerSpec, SetAbstraction, _load, _param_tensors, _state, block_spec, make_layer
from .tensor import MlpSpec, ShapeError, Tensor, concat, init_mlp, mlp_forward, mlp_infer

EXPERIMENTS = ("baseline", "all-simple", "first-simple", "rest-simple", "full-extractor", "linmem-extractor")
READOUTS = ("global-max", "global-max||mean")
DESK_WIDTHS = (32, 64, 128, 128)
DESK_HEAD_HIDDEN = 64
DESK_K = 16
EXTRACTOR_FEATURES = ("target-pos", "rel-pos", "distance")


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple[LayerSpec, ...]
    head: MlpSpec
    readout: str = "global-max"
    k: int = DESK_K
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a model needs at least one block")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        for i in range(1, len(self.blocks)):
            prev, cur = self.blocks[i - 1], self.blocks[i]
            if cur.in_features != prev.out_width:
                raise ShapeError(f"block {i} expects {cur.in_features} input features, "
                                 f"block {i - 1} produces {prev.out_width}")
        pooled = self.blocks[-1].out_width * (2 if self.readout == "global-max||mean" else 1)
        if self.head.in_width != pooled:
            raise ShapeError(f"head expects {self.head.in_width} inputs, readout gives {pooled}")

    @property
    def classes(self) -> int:
        return self.head.out_width

    @property
    def in_features(self) -> int:
        return self.blocks[0].in_features

    def param_count(self) -> int:
        return sum(b.param_count() for b in self.blocks) + self.head.param_count()


def preset(experiment: str, classes: int, scale: str = "desk", *, linmem_weights: str = "separate",
           in_features: int = 3, seed: int = 0) -> ModelConfig:
    """Block stacks for the simplification experiments.

    ``baseline`` is four EdgeConv blocks; the numbered experiments replace all
    blocks (``all-simple``), only the first (``first-simple``) or all but the
    first (``rest-simple``) with simplified blocks.  ``full-extractor`` and
    ``linmem-extractor`` put a geometric extractor in front of three
    simplified blocks.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    if scale != "desk":
        raise ValueError("only the desk scale is available")
    kinds = {
        "baseline": ["edgeconv"] * 4,
        "all-simple": ["simple-conv"] * 4,
        "first-simple": ["simple-conv"] + ["edgeconv"] * 3,
        "rest-simple": ["edgeconv"] + ["simple-conv"] * 3,
        "full-extractor": ["geo-extractor"] + ["simple-conv"] * 3,
        "linmem-extractor": ["linmem-extractor"] + ["simple-conv"] * 3,
    }[experiment]
    blocks = []
    width_in = in_features
    for kind, width in zip(kinds, DESK_WIDTHS):
        extra = {}
        if kind == "geo-extractor":
            extra["features"] = EXTRACTOR_FEATURES
        if kind == "linmem-extractor":
            extra["linmem_weights"] = linmem_weights
        blocks.append(block_spec(kind, width_in, width, **extra))
        width_in = blocks[-1].out_width
    head = MlpSpec((width_in, DESK_HEAD_HIDDEN, classes), activate_last=False)
    return ModelConfig(tuple(blocks), head, "global-max", DESK_K, seed)


@dataclass
class Batch:
    """Several clouds stacked into one disjoint graph."""

    positions: np.ndarray
    inputs: np.ndarray
    offsets: np.ndarray
    graph: NeighborGraph
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.offsets) - 1

    @classmethod
    def from_clouds(cls, clouds: Sequence[PointCloud], k: int, clamp: bool = False) -> "Batch":
        graphs, sizes = [], []
        for c in clouds:
            n = len(c)
            kk = min(k, n - 1) if clamp else k
            if n <= kk or kk < 1:
                raise ValueError(f"cloud with {n} points cannot have {kk} neighbours")
            graphs.append(knn_graph(c, kk))
            sizes.append(n)
        offsets = np.zeros(len(clouds) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        labels = None
        if all(c.label is not None for c in clouds):
            labels = np.array([c.label for c in clouds], dtype=np.int64)
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.node_inputs() for c in clouds]),
            offsets,
            NeighborGraph.disjoint_union(graphs),
            labels,
        )


def _knn_per_cloud(P: np.ndarray, offsets: np.ndarray, k: int) -> NeighborGraph:
    graphs = []
    for c in range(len(offsets) - 1):
        pts = P[offsets[c]:offsets[c + 1]]
        graphs.append(knn_graph(pts, min(k, len(pts) - 1)))
    return NeighborGraph.disjoint_union(graphs)


def _segment_stats(X: np.ndarray, offsets: np.ndarray, readout: str) -> np.ndarray:
    starts = offsets[:-1]
    pooled = np.maximum.reduceat(X, starts, axis=0)
    if readout == "global-max||mean":
        sums = np.add.reduceat(X.astype(np.float64), starts, axis=0)
        mean = (sums / np.diff(offsets)[:, None]).astype(X.dtype)
        pooled = np.concatenate([pooled, mean], axis=1)
    return pooled


class Model:
    """Parameters and wiring for a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        self.config = config
        seed = config.seed if seed is None else seed
        rng = substream(seed, "init")
        self.blocks: list[Layer] = [make_layer(spec, rng, f"block{i}") for i, spec in enumerate(config.blocks)]
        self.head = init_mlp(config.head, rng, "head")

    def parameters(self) -> list[Tensor]:
        ps = []
        for b in self.blocks:
            ps += b.parameters()
        return ps + _param_tensors(self.head)

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out.update(b.state_dict())
        out.update(_state(self.head))
        return out

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        given = set(values)
        if expected != given:
            missing = sorted(expected - given)
            extra = sorted(given - expected)
            raise KeyError(f"missing/extra tensor: missing={missing} extra={extra}")
        for b in self.blocks:
            b.load_state(values)
        _load(self.head, values)

    def _check(self, batch: Batch) -> None:
        if batch.inputs.shape[1] != self.config.in_features:
            raise ShapeError(f"model expects {self.config.in_features} input channels, "
                             f"got {batch.inputs.shape[1]}")

    def forward(self, batch: Batch, train: bool = False) -> Tensor:
        """Tape-recorded logits for a batch."""
        self._check(batch)
        P, offsets, graph = batch.positions, batch.offsets, batch.graph
        X = Tensor(batch.inputs)
        for layer in self.blocks:
            if isinstance(layer, SetAbstraction):
                P, X, offsets = layer.forward(P, X, offsets, train)
                graph = None
                continue
            if graph is None:
                graph = _knn_per_cloud(P, offsets, self.config.k)
            X = layer.forward(graph, P, X, train)
        pooled = segment_max_op(offsets, X)
        if self.config.readout == "global-max||mean":
            pooled = concat([pooled, segment_mean_op(offsets, X)])
        return mlp_forward(self.config.head, pooled, self.head, "train" if train else "frozen")

    def infer(self, batch: Batch, dtype=np.float64, counters=None) -> np.ndarray:
        """Frozen-mode logits on raw arrays.

        ``counters`` may supply one :class:`MemoryCounter` per block.
        """
        self._check(batch)
        P, offsets, graph = batch.positions.astype(dtype), batch.offsets, batch.graph
        X = batch.inputs.astype(dtype)
        for i, layer in enumerate(self.blocks):
            counter = None if counters is None else counters[i]
            if isinstance(layer, SetAbstraction):
                P, X, offsets = layer.infer(P, X, offsets, counter, dtype)
                graph = None
                continue
            if graph is None:
                graph = _knn_per_cloud(P, offsets, self.config.k)
            X = layer.infer(graph, P, X, counter, dtype)
        pooled = _segment_stats(X, offsets, self.config.readout)
        return mlp_infer(self.config.head, pooled, self.head, dtype=dtype)


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    return Model(config, seed)


def model_forward(model: Model, cloud: PointCloud, dtype=np.float64) -> np.ndarray:
    """Logits for a single cloud (frozen batch norm)."""
    if len(cloud) <= model.config.k:
        raise ValueError(f"cloud has {len(cloud)} points; needs more than k={model.config.k}")
    return model.infer(Batch.from_clouds([cloud], model.config.k), dtype)[0]


def predict(model: Model, clouds: Sequence[PointCloud], batch_size: int = 32, clamp: bool = False) -> np.ndarray:
    labels = []
    for start in range(0, len(clouds), batch_size):
        chunk = clouds[start:start + batch_size]
        logits = model.infer(Batch.from_clouds(chunk, model.config.k, clamp=clamp))
        labels.append(np.argmax(logits, axis=1))
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
