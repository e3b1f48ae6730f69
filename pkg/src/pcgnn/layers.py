"""Graph layers for point clouds.

Each layer has two execution routes sharing the same parameters:

``forward``
    tape-recorded, float64, used for training and gradient checks;
``infer``
    frozen batch norm on raw arrays, any float dtype, with every transient
    buffer routed through a :class:`~pcgnn.kernels.MemoryCounter`.

Baseline layers (``edgeconv``, ``geo-extractor``, ``pnpp-sa``) materialise
one message per edge.  ``simple-conv`` and ``linmem-extractor`` only build
source-node values and aggregate them on the vertex path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import farthest_point_sample, radius_graph
from .kernels import (
    EdgeFeatureSet,
    MemoryCounter,
    NeighborGraph,
    NullCounter,
    aggregate_edge_materialized,
    aggregate_vertex,
    build_edge_messages,
    check_aggregators,
    edge_aggregate_op,
    edge_linear_op,
    vertex_aggregate_op,
)
from .tensor import MlpSpec, ShapeError, Tensor, concat, init_mlp, mlp_forward, mlp_infer, sub

LAYER_KINDS = ("edgeconv", "pnpp-sa", "simple-conv", "geo-extractor", "linmem-extractor")

_DEFAULT_FEATURES = {
    "edgeconv": ("target-feat", "centralized-feat"),
    "pnpp-sa": ("source-feat", "rel-pos"),
    "simple-conv": ("source-feat",),
    "linmem-extractor": ("source-pos",),
}


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one graph block.

    ``in_features`` is the node representation width entering the block.  The
    MLP input width must equal the message width implied by ``features``.
    """

    kind: str
    in_features: int
    mlp: MlpSpec
    features: EdgeFeatureSet | None = None
    aggregators: tuple[str, ...] = ("max",)
    linmem_weights: str | None = None
    sampling: str = "none"
    samples: int | None = None
    radius: float | None = None
    cap: int | None = None
    sampling_seed: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "aggregators", check_aggregators(self.aggregators))
        fset = self.features
        if fset is None:
            if self.kind == "geo-extractor":
                raise ValueError("geo-extractor needs an explicit feature set")
            fset = EdgeFeatureSet(_DEFAULT_FEATURES[self.kind])
        elif not isinstance(fset, EdgeFeatureSet):
            fset = EdgeFeatureSet(tuple(fset))
        object.__setattr__(self, "features", fset)

        if self.kind == "edgeconv" and fset.features != _DEFAULT_FEATURES["edgeconv"]:
            raise ValueError("edgeconv messages are fixed to x_i || x_j - x_i")
        if self.kind == "simple-conv":
            if not fset.source_only or "source-feat" not in fset:
                raise ValueError(f"simple-conv needs source-only terms incl. source-feat, got {fset.features}")
        if self.kind == "linmem-extractor":
            if fset.features != ("source-pos",):
                raise ValueError("linmem-extractor consumes positions only")
            if self.linmem_weights not in ("shared", "separate"):
                raise ValueError("linmem-extractor needs linmem_weights 'shared' or 'separate'")
        elif self.linmem_weights is not None:
            raise ValueError("linmem_weights only applies to linmem-extractor")
        if self.kind == "pnpp-sa":
            if self.sampling not in ("none", "fps", "random"):
                raise ValueError(f"unknown sampling {self.sampling!r}")
            if self.sampling != "none" and (self.samples is None or self.samples < 1):
                raise ValueError("fps/random sampling needs a positive sample count")
            if self.radius is None or self.radius <= 0 or self.cap is None or self.cap < 1:
                raise ValueError("pnpp-sa needs a positive radius and cap")
        elif self.sampling != "none":
            raise ValueError("sampling only applies to pnpp-sa")
        if self.mlp.in_width != self.message_width:
            raise ShapeError(f"{self.kind}: MLP input width {self.mlp.in_width} != message width "
                             f"{self.message_width}")

    @property
    def message_width(self) -> int:
        return self.features.width(self.in_features)

    @property
    def out_width(self) -> int:
        return self.mlp.out_width * len(self.aggregators)

    @property
    def vertex_path(self) -> bool:
        return self.kind in ("simple-conv", "linmem-extractor")

    def param_count(self) -> int:
        n = self.mlp.param_count()
        if self.linmem_weights == "separate":
            n *= 2
        return n


def _param_tensors(params: list[dict]) -> list[Tensor]:
    out = []
    for layer in params:
        for key in ("W", "b", "gamma", "beta"):
            if key in layer:
                out.append(layer[key])
    return out


def _state(params: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for layer in params:
        for key in ("W", "b", "gamma", "beta"):
            if key in layer:
                out[layer[key].name] = layer[key].data
        if "bn" in layer:
            base = layer["W"].name[:-2]
            out[f"{base}.running_mean"] = layer["bn"].mean
            out[f"{base}.running_var"] = layer["bn"].var
    return out


def _load(params: list[dict], values: dict[str, np.ndarray]) -> None:
    for layer in params:
        for key in ("W", "b", "gamma", "beta"):
            if key in layer:
                t = layer[key]
                t.data = np.asarray(values[t.name], dtype=np.float64).reshape(t.shape).copy()
        if "bn" in layer:
            base = layer["W"].name[:-2]
            layer["bn"].mean = np.asarray(values[f"{base}.running_mean"], dtype=np.float64).reshape(1, -1).copy()
            layer["bn"].var = np.asarray(values[f"{base}.running_var"], dtype=np.float64).reshape(1, -1).copy()


class Layer:
    """A graph block built from a :class:`LayerSpec` with its own parameters."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str = "layer"):
        self.spec = spec
        self.name = name
        self.mlp = init_mlp(spec.mlp, rng, f"{name}.mlp")
        self.mlp2 = init_mlp(spec.mlp, rng, f"{name}.mlp2") if spec.linmem_weights == "separate" else None

    def parameters(self) -> list[Tensor]:
        ps = _param_tensors(self.mlp)
        if self.mlp2 is not None:
            ps += _param_tensors(self.mlp2)
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        out = _state(self.mlp)
        if self.mlp2 is not None:
            out.update(_state(self.mlp2))
        return out

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        _load(self.mlp, values)
        if self.mlp2 is not None:
            _load(self.mlp2, values)

    # -- tape route -----------------------------------------------------------

    def forward(self, graph: NeighborGraph, P: np.ndarray, X: Tensor | None, train: bool = False) -> Tensor:
        spec = self.spec
        mode = "train" if train else "frozen"
        kind = spec.kind
        if kind == "pnpp-sa":
            raise TypeError("pnpp-sa layers downsample; use SetAbstraction.forward")
        if kind in ("edgeconv", "geo-extractor"):
            first = self.mlp[0]
            z = edge_linear_op(graph, P, X, spec.features, first["W"], first["b"])
            h = mlp_forward(spec.mlp, z, self.mlp, mode, first_linear_done=True)
            return edge_aggregate_op(graph, h, spec.aggregators)
        if kind == "simple-conv":
            z = X if "source-pos" not in spec.features else concat([X, Tensor(P)])
            h = mlp_forward(spec.mlp, z, self.mlp, mode)
            return vertex_aggregate_op(graph, h, spec.aggregators)
        # linmem-extractor: (agg_j MLP1(p_j)) - MLP2(p_i)
        pos = Tensor(P)
        h1 = mlp_forward(spec.mlp, pos, self.mlp, mode)
        h2 = h1 if self.mlp2 is None else mlp_forward(spec.mlp, pos, self.mlp2, mode)
        pooled = vertex_aggregate_op(graph, h1, spec.aggregators)
        if len(spec.aggregators) > 1:
            h2 = concat([h2] * len(spec.aggregators))
        return sub(pooled, h2)

    # -- inference route ------------------------------------------------------

    def infer(self, graph: NeighborGraph, P: np.ndarray, X: np.ndarray | None,
              counter: MemoryCounter | None = None, dtype=None) -> np.ndarray:
        spec = self.spec
        counter = counter or NullCounter()
        if dtype is None:
            dtype = X.dtype if X is not None else np.float64
        kind = spec.kind
        if kind in ("edgeconv", "geo-extractor"):
            msgs = build_edge_messages(graph, P, X, spec.features, counter, dtype=dtype)
            h = mlp_infer(spec.mlp, msgs, self.mlp, counter, dtype)
            counter.free(msgs)
            del msgs
            out = aggregate_edge_materialized(graph, h, spec.aggregators, counter)
            counter.free(h)
            return out
        if kind == "simple-conv":
            if "source-pos" in spec.features:
                z = counter.empty((X.shape[0], X.shape[1] + P.shape[1]), dtype)
                z[:, :X.shape[1]] = X
                z[:, X.shape[1]:] = P
            else:
                z = X
            h = mlp_infer(spec.mlp, z, self.mlp, counter, dtype)
            if z is not X:
                counter.free(z)
            out = aggregate_vertex(graph, h, spec.aggregators, counter)
            counter.free(h)
            return out
        if kind == "linmem-extractor":
            h1 = mlp_infer(spec.mlp, P, self.mlp, counter, dtype)
            out = aggregate_vertex(graph, h1, spec.aggregators, counter)
            if self.mlp2 is None:
                h2 = h1
            else:
                counter.free(h1)
                del h1
                h2 = mlp_infer(spec.mlp, P, self.mlp2, counter, dtype)
            d = h2.shape[1]
            for a in range(len(spec.aggregators)):
                out[:, a * d:(a + 1) * d] -= h2
            counter.free(h2)
            return out
        raise TypeError("pnpp-sa layers downsample; use SetAbstraction.infer")


@dataclass
class Grouping:
    """Structure chosen by a set-abstraction block for one batch."""

    centers: np.ndarray          # indices into the input nodes
    graph: NeighborGraph         # bipartite: centres <- input nodes
    offsets: np.ndarray          # per-cloud row ranges of the centres


class SetAbstraction(Layer):
    """Single-scale-grouping PointNet++ block: sample, group by radius, pool."""

    def group(self, P: np.ndarray, offsets: np.ndarray) -> Grouping:
        spec = self.spec
        centers, graphs, new_offsets = [], [], [0]
        rng = np.random.default_rng(spec.sampling_seed)
        for c in range(len(offsets) - 1):
            lo, hi = int(offsets[c]), int(offsets[c + 1])
            pts = P[lo:hi]
            n = hi - lo
            m = n if spec.sampling == "none" else spec.samples
            if m > n:
                raise ValueError(f"cannot sample {m} centroids from {n} points")
            if spec.sampling == "fps":
                idx = farthest_point_sample(pts, m, 0)
            elif spec.sampling == "random":
                idx = np.sort(rng.choice(n, m, replace=False))
            else:
                idx = np.arange(n)
            graphs.append(radius_graph(pts, spec.radius, spec.cap, centers=idx))
            centers.append(idx + lo)
            new_offsets.append(new_offsets[-1] + m)
        return Grouping(np.concatenate(centers), NeighborGraph.disjoint_union(graphs),
                        np.asarray(new_offsets, dtype=np.int64))

    def forward(self, P: np.ndarray, X: Tensor, offsets: np.ndarray, train: bool = False):
        grp = self.group(P, offsets)
        first = self.mlp[0]
        z = edge_linear_op(grp.graph, P[grp.centers], None, self.spec.features, first["W"],
                           first["b"], source_positions=P, source_X=X)
        h = mlp_forward(self.spec.mlp, z, self.mlp, "train" if train else "frozen",
                        first_linear_done=True)
        return P[grp.centers], edge_aggregate_op(grp.graph, h, self.spec.aggregators), grp.offsets

    def infer(self, P: np.ndarray, X: np.ndarray, offsets: np.ndarray,
              counter: MemoryCounter | None = None, dtype=None):
        counter = counter or NullCounter()
        dtype = dtype or X.dtype
        grp = self.group(P, offsets)
        msgs = build_edge_messages(grp.graph, P[grp.centers], None, self.spec.features, counter,
                                   source_positions=P, source_feats=X, dtype=dtype)
        h = mlp_infer(self.spec.mlp, msgs, self.mlp, counter, dtype)
        counter.free(msgs)
        del msgs
        out = aggregate_edge_materialized(grp.graph, h, self.spec.aggregators, counter)
        counter.free(h)
        return P[grp.centers], out, grp.offsets


def make_layer(spec: LayerSpec, rng: np.random.Generator, name: str = "layer") -> Layer:
    cls = SetAbstraction if spec.kind == "pnpp-sa" else Layer
    return cls(spec, rng, name)


# -- spec helpers ------------------------------------------------------------


def block_spec(kind: str, in_features: int, width: int, *, features=None, aggregators=("max",),
               linmem_weights=None, depth: int = 1, batch_norm: bool = True, **extra) -> LayerSpec:
    """LayerSpec with an MLP of ``depth`` layers of ``width`` units sized to the message."""
    if features is None:
        if kind not in _DEFAULT_FEATURES:
            raise ValueError(f"{kind} needs an explicit feature set")
        features = _DEFAULT_FEATURES[kind]
    fset = EdgeFeatureSet(tuple(features))
    msg = fset.width(in_features)
    mlp = MlpSpec((msg,) + (width,) * depth, batch_norm=batch_norm)
    return LayerSpec(kind, in_features, mlp, fset, tuple(aggregators), linmem_weights, **extra)
