"""Message construction and neighbourhood aggregation on CSR graphs.

Two execution paths are provided:

* the edge-materialised path builds an ``E x d`` buffer of per-edge values
  and reduces it per target (:func:`build_edge_messages`,
  :func:`aggregate_edge_materialized`);
* the vertex-centric path reduces ``V x d`` node values directly over the
  CSR structure (:func:`aggregate_vertex`), so it never holds more than a
  few ``V x d`` buffers at once.

Kernels take an optional :class:`MemoryCounter`; every transient buffer they
create is allocated through it so peak usage can be read back afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, _emit

__all__ = [
    "NeighborGraph",
    "EdgeFeatureSet",
    "FEATURE_ORDER",
    "AGGREGATORS",
    "check_aggregators",
    "MemoryCounter",
    "NullCounter",
    "build_edge_messages",
    "aggregate_edge_materialized",
    "aggregate_vertex",
    "edge_messages_op",
    "edge_linear_op",
    "edge_aggregate_op",
    "vertex_aggregate_op",
    "segment_max_op",
]


# -- allocation accounting ---------------------------------------------------


class MemoryCounter:
    """Tracks live and peak bytes of buffers routed through it."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _add(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def empty(self, shape, dtype=np.float64) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        self._add(arr.nbytes)
        return arr

    def zeros(self, shape, dtype=np.float64) -> np.ndarray:
        arr = np.zeros(shape, dtype=dtype)
        self._add(arr.nbytes)
        return arr

    def adopt(self, arr: np.ndarray) -> np.ndarray:
        self._add(arr.nbytes)
        return arr

    def free(self, arr: np.ndarray) -> None:
        self.live -= arr.nbytes

    def note(self, count: int, dtype) -> None:
        self._add(count * np.dtype(dtype).itemsize)

    def release(self, count: int, dtype) -> None:
        self.live -= count * np.dtype(dtype).itemsize

    def peak_floats(self, dtype=np.float32) -> float:
        return self.peak / np.dtype(dtype).itemsize


class NullCounter(MemoryCounter):
    def _add(self, nbytes: int) -> None:
        pass

    def free(self, arr) -> None:
        pass

    def release(self, count, dtype) -> None:
        pass


# -- graph structure ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Directed adjacency grouped by target.

    Row ``i`` (``sources[offsets[i]:offsets[i+1]]``) lists the source nodes
    sending messages to target ``i``, in strictly increasing order.  Sources
    index a node set of size ``num_sources`` which defaults to the number of
    targets.
    """

    offsets: np.ndarray
    sources: np.ndarray
    num_sources: int = -1

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        sources = np.ascontiguousarray(self.sources, dtype=np.int64)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "sources", sources)
        if self.num_sources < 0:
            object.__setattr__(self, "num_sources", len(offsets) - 1)
        if offsets.ndim != 1 or len(offsets) < 1 or offsets[0] != 0:
            raise ValueError("offsets must be 1-D and start at 0")
        if np.any(np.diff(offsets) < 0):
            raise ValueError("offsets must be non-decreasing")
        if offsets[-1] != len(sources):
            raise ValueError(f"offsets[-1]={offsets[-1]} but {len(sources)} sources")
        if len(sources) and (sources.min() < 0 or sources.max() >= self.num_sources):
            raise ValueError("source index out of range")
        steps = np.diff(sources)
        inner = np.ones(len(steps), dtype=bool)
        starts = offsets[1:-1]
        inner[starts[(starts > 0) & (starts < len(sources))] - 1] = False
        if np.any(steps[inner] <= 0):
            raise ValueError("sources within a row must be strictly increasing")

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], num_sources: int = -1) -> "NeighborGraph":
        rows = [np.sort(np.asarray(list(r), dtype=np.int64)) for r in rows]
        offsets = np.zeros(len(rows) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(r) for r in rows])
        sources = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(offsets, sources, num_sources)

    @property
    def V(self) -> int:
        return len(self.offsets) - 1

    @property
    def E(self) -> int:
        return len(self.sources)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def targets(self) -> np.ndarray:
        return np.repeat(np.arange(self.V, dtype=np.int64), self.degrees)

    @cached_property
    def uniform_degree(self) -> int | None:
        d = self.degrees
        if len(d) and d.min() == d.max() and d[0] > 0:
            return int(d[0])
        return None

    def row(self, i: int) -> np.ndarray:
        return self.sources[self.offsets[i]:self.offsets[i + 1]]

    def rows(self) -> list[np.ndarray]:
        return [self.row(i) for i in range(self.V)]

    @cached_property
    def slots(self) -> list[tuple[np.ndarray | None, np.ndarray]]:
        """Per slot position ``s``: (targets with degree > s, their s-th source).

        ``None`` in the first entry means "every target" and lets the
        aggregation loop avoid fancy-index writes.
        """
        deg = self.degrees
        out = []
        for s in range(int(deg.max()) if len(deg) else 0):
            rows = np.flatnonzero(deg > s)
            srcs = np.ascontiguousarray(self.sources[self.offsets[rows] + s])
            out.append((None if len(rows) == self.V else rows, srcs))
        return out

    @cached_property
    def _source_scatter(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.ones(self.E), (self.sources, np.arange(self.E))), shape=(self.num_sources, self.E)
        )

    @cached_property
    def _target_scatter(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.ones(self.E), (self.targets, np.arange(self.E))), shape=(self.V, self.E)
        )

    def scatter_to_sources(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(self._source_scatter @ g)

    def scatter_to_targets(self, g: np.ndarray) -> np.ndarray:
        k = self.uniform_degree
        if k is not None:
            return g.reshape(self.V, k, -1).sum(axis=1)
        return np.asarray(self._target_scatter @ g)

    def has_empty_rows(self) -> bool:
        return bool(np.any(self.degrees == 0))

    @staticmethod
    def disjoint_union(graphs: Sequence["NeighborGraph"]) -> "NeighborGraph":
        offsets = [np.zeros(1, dtype=np.int64)]
        sources = []
        e_base = 0
        s_base = 0
        for g in graphs:
            offsets.append(g.offsets[1:] + e_base)
            sources.append(g.sources + s_base)
            e_base += g.E
            s_base += g.num_sources
        return NeighborGraph(np.concatenate(offsets), np.concatenate(sources), s_base)


# -- edge features -----------------------------------------------------------

FEATURE_ORDER = (
    "source-feat",
    "target-feat",
    "centralized-feat",
    "source-pos",
    "target-pos",
    "rel-pos",
    "distance",
)
_FEAT_TERMS = {"source-feat", "target-feat", "centralized-feat"}
_TARGET_TERMS = {"target-feat", "centralized-feat", "target-pos", "rel-pos", "distance"}


@dataclass(frozen=True)
class EdgeFeatureSet:
    """Which terms make up an edge message, kept in canonical order."""

    features: tuple[str, ...]

    def __post_init__(self):
        feats = set(self.features)
        unknown = feats - set(FEATURE_ORDER)
        if unknown:
            raise ValueError(f"unknown edge features {sorted(unknown)}")
        if not feats:
            raise ValueError("an edge feature set needs at least one term")
        object.__setattr__(self, "features", tuple(f for f in FEATURE_ORDER if f in feats))

    @classmethod
    def of(cls, *names: str) -> "EdgeFeatureSet":
        return cls(tuple(names))

    def __contains__(self, name: str) -> bool:
        return name in self.features

    @property
    def needs_node_features(self) -> bool:
        return bool(_FEAT_TERMS & set(self.features))

    @property
    def source_only(self) -> bool:
        return not (_TARGET_TERMS & set(self.features))

    def term_width(self, name: str, feat_dim: int, pos_dim: int = 3) -> int:
        if name in _FEAT_TERMS:
            return feat_dim
        if name == "distance":
            return 1
        return pos_dim

    def width(self, feat_dim: int, pos_dim: int = 3) -> int:
        return sum(self.term_width(f, feat_dim, pos_dim) for f in self.features)


AGGREGATORS = ("max", "min", "mean")


def check_aggregators(aggs: Sequence[str]) -> tuple[str, ...]:
    aggs = tuple(aggs)
    if not aggs:
        raise ValueError("at least one aggregator is required")
    if len(set(aggs)) != len(aggs):
        raise ValueError(f"duplicate aggregators in {aggs}")
    for a in aggs:
        if a not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {a!r}")
    return aggs


# -- edge-materialised path --------------------------------------------------


def build_edge_messages(graph: NeighborGraph, positions: np.ndarray, node_feats: np.ndarray | None,
                        fset: EdgeFeatureSet, counter: MemoryCounter | None = None,
                        source_positions: np.ndarray | None = None,
                        source_feats: np.ndarray | None = None, dtype=None) -> np.ndarray:
    """Concatenate the enabled terms for every edge ``j -> i`` into an ``E x d`` array.

    Terms appear in the canonical order ``source-feat, target-feat,
    centralized-feat, source-pos, target-pos, rel-pos, distance``.  For
    bipartite graphs ``source_positions`` / ``source_feats`` describe the
    source node set; otherwise sources and targets share ``positions`` and
    ``node_feats``.
    """
    counter = counter or NullCounter()
    P_t = np.asarray(positions)
    P_s = P_t if source_positions is None else np.asarray(source_positions)
    X_t = node_feats
    X_s = X_t if source_feats is None else source_feats
    feats = set(fset.features)
    if feats & {"source-feat", "centralized-feat"} and X_s is None:
        raise ValueError(f"feature terms {fset.features} need source node features, none given")
    if feats & {"target-feat", "centralized-feat"} and X_t is None:
        raise ValueError(f"feature terms {fset.features} need target node features, none given")
    if X_t is not None and X_t.shape[0] != graph.V:
        raise ShapeError(f"node features have {X_t.shape[0]} rows, graph has {graph.V} targets")
    if X_s is not None and X_s.shape[0] != graph.num_sources:
        raise ShapeError(f"source features have {X_s.shape[0]} rows, graph has "
                         f"{graph.num_sources} sources")
    if P_t.shape[0] != graph.V or P_s.shape[0] != graph.num_sources:
        raise ShapeError("position rows do not match the graph")
    ref = X_t if X_t is not None else X_s
    feat_dim = ref.shape[1] if ref is not None else 0
    pos_dim = P_t.shape[1]
    if dtype is None:
        dtype = ref.dtype if ref is not None else P_t.dtype
    src, tgt = graph.sources, graph.targets
    out = counter.empty((graph.E, fset.width(feat_dim, pos_dim)), dtype)
    col = 0
    rel_cols = None
    for name in fset.features:
        w = fset.term_width(name, feat_dim, pos_dim)
        view = out[:, col:col + w]
        if name == "source-feat":
            _fill_rows(view, X_s, src, None, None, counter)
        elif name == "target-feat":
            _fill_rows(view, X_t, tgt, None, None, counter)
        elif name == "centralized-feat":
            _fill_rows(view, X_s, src, X_t, tgt, counter)
        elif name == "source-pos":
            _fill_rows(view, P_s, src, None, None, counter)
        elif name == "target-pos":
            _fill_rows(view, P_t, tgt, None, None, counter)
        elif name == "rel-pos":
            _fill_rows(view, P_s, src, P_t, tgt, counter)
            rel_cols = (col, col + w)
        elif name == "distance":
            if rel_cols is None:
                rel = counter.empty((graph.E, pos_dim), dtype)
                _fill_rows(rel, P_s, src, P_t, tgt, counter)
            else:
                rel = out[:, rel_cols[0]:rel_cols[1]]
            view[:, 0] = np.sqrt(np.einsum("ij,ij->i", rel, rel))
            if rel_cols is None:
                counter.free(rel)
        col += w
    return out


_CHUNK = 4096


def _fill_rows(view, A, a_idx, B, b_idx, counter) -> None:
    """``view[:] = A[a_idx] (- B[b_idx])`` using row-chunked scratch."""
    for start in range(0, view.shape[0], _CHUNK):
        stop = min(start + _CHUNK, view.shape[0])
        n = (stop - start) * view.shape[1]
        counter.note(n, view.dtype)
        view[start:stop] = A[a_idx[start:stop]]
        if B is not None:
            view[start:stop] -= B[b_idx[start:stop]]
        counter.release(n, view.dtype)


def _reduce_rows(graph: NeighborGraph, vals: np.ndarray, agg: str, out: np.ndarray) -> None:
    if graph.has_empty_rows():
        raise ValueError("cannot aggregate over a target with no incoming edges")
    k = graph.uniform_degree
    if k is not None:
        blocks = vals.reshape(graph.V, k, vals.shape[1])
        if agg == "max":
            np.max(blocks, axis=1, out=out)
        elif agg == "min":
            np.min(blocks, axis=1, out=out)
        else:
            out[...] = blocks.sum(axis=1, dtype=np.float64) / k
        return
    starts = graph.offsets[:-1]
    if agg == "max":
        np.maximum.reduceat(vals, starts, axis=0, out=out)
    elif agg == "min":
        np.minimum.reduceat(vals, starts, axis=0, out=out)
    else:
        acc = np.add.reduceat(vals.astype(np.float64, copy=False), starts, axis=0)
        out[...] = acc / graph.degrees[:, None]


def aggregate_edge_materialized(graph: NeighborGraph, edge_vals: np.ndarray, aggs: Sequence[str],
                                counter: MemoryCounter | None = None) -> np.ndarray:
    """Reduce the rows of an ``E x d`` buffer per target.

    Multiple aggregators give column blocks in list order.
    """
    counter = counter or NullCounter()
    aggs = check_aggregators(aggs)
    if edge_vals.shape[0] != graph.E:
        raise ShapeError(f"edge values have {edge_vals.shape[0]} rows, graph has {graph.E} edges")
    d = edge_vals.shape[1]
    out = counter.empty((graph.V, d * len(aggs)), edge_vals.dtype)
    for a, agg in enumerate(aggs):
        _reduce_rows(graph, edge_vals, agg, out[:, a * d:(a + 1) * d])
    return out


def _first_arg_edges(graph: NeighborGraph, vals: np.ndarray, reduced: np.ndarray,
                     agg: str = "max") -> np.ndarray:
    """Edge index of the first row attaining ``reduced`` per (target, column)."""
    k = graph.uniform_degree
    if k is not None:
        blocks = vals.reshape(graph.V, k, vals.shape[1])
        local = blocks.argmax(axis=1) if agg == "max" else blocks.argmin(axis=1)
        return graph.offsets[:-1, None] + local
    E = graph.E
    hit = vals == reduced[graph.targets]
    cand = np.where(hit, np.arange(E)[:, None], E)
    return np.minimum.reduceat(cand, graph.offsets[:-1], axis=0)


# -- vertex-centric path -----------------------------------------------------


def aggregate_vertex(graph: NeighborGraph, node_vals: np.ndarray, aggs: Sequence[str],
                     counter: MemoryCounter | None = None,
                     return_argsrc: bool = False):
    """Reduce node values over each target's neighbours without an E-sized buffer.

    Walks slot positions ``s = 0, 1, ...`` of every CSR row, gathering one
    ``V x d`` block of source values per step, so transient memory is the
    output plus one gather buffer.  With ``return_argsrc`` the source index
    of the first extremum per (target, column) is returned for max/min.
    """
    counter = counter or NullCounter()
    aggs = check_aggregators(aggs)
    if node_vals.shape[0] != graph.num_sources:
        raise ShapeError(f"node values have {node_vals.shape[0]} rows, graph has "
                         f"{graph.num_sources} sources")
    if graph.has_empty_rows():
        raise ValueError("cannot aggregate over a target with no incoming edges")
    V, d = graph.V, node_vals.shape[1]
    dtype = node_vals.dtype
    out = counter.empty((V, d * len(aggs)), dtype)
    tmp = counter.empty((V, d), dtype)
    argsrc = {}
    slots = graph.slots
    for a, agg in enumerate(aggs):
        res = out[:, a * d:(a + 1) * d]
        if agg == "mean":
            acc = counter.zeros((V, d), np.float64)
            for rows, srcs in slots:
                if rows is None:
                    np.take(node_vals, srcs, axis=0, out=tmp, mode="clip")
                    acc += tmp
                else:
                    acc[rows] += node_vals[srcs]
            acc /= graph.degrees[:, None]
            res[...] = acc
            counter.free(acc)
            continue
        ufunc = np.maximum if agg == "max" else np.minimum
        better = np.greater if agg == "max" else np.less
        rows0, srcs0 = slots[0]
        if res.flags.c_contiguous:
            np.take(node_vals, srcs0, axis=0, out=res, mode="clip")
        else:
            np.take(node_vals, srcs0, axis=0, out=tmp, mode="clip")
            res[...] = tmp
        arg = None
        if return_argsrc:
            arg = np.repeat(srcs0[:, None], d, axis=1)
        for rows, srcs in slots[1:]:
            if rows is None:
                np.take(node_vals, srcs, axis=0, out=tmp, mode="clip")
                if arg is not None:
                    np.copyto(arg, srcs[:, None], where=better(tmp, res))
                ufunc(res, tmp, out=res)
            else:
                cand = node_vals[srcs]
                cur = res[rows]
                if arg is not None:
                    upd = better(cand, cur)
                    sub = arg[rows]
                    sub[upd] = np.broadcast_to(srcs[:, None], cand.shape)[upd]
                    arg[rows] = sub
                res[rows] = ufunc(cur, cand)
        if arg is not None:
            argsrc[agg] = arg
    counter.free(tmp)
    if return_argsrc:
        return out, argsrc
    return out


# -- tape-aware wrappers -----------------------------------------------------


def edge_messages_op(graph: NeighborGraph, positions: np.ndarray, X: Tensor | None,
                     fset: EdgeFeatureSet, source_positions=None,
                     source_X: Tensor | None = None) -> Tensor:
    """Differentiable :func:`build_edge_messages`.

    Gradients flow to the node features only; positions are constants.  For
    bipartite graphs ``X`` holds target features (may be ``None``) and
    ``source_X`` the source features.
    """
    bip = source_X is not None
    Xs = source_X if bip else X
    data = build_edge_messages(
        graph, positions, None if X is None else X.data, fset,
        source_positions=source_positions, source_feats=None if Xs is None else Xs.data,
    )
    ref = X if X is not None else Xs
    if ref is None:
        return Tensor(data)
    feat_dim = ref.cols
    pos_dim = np.asarray(positions).shape[1]
    spans = {}
    col = 0
    for name in fset.features:
        w = fset.term_width(name, feat_dim, pos_dim)
        spans[name] = (col, col + w)
        col += w

    def vjp(g):
        g_src = None
        g_tgt = None
        for name, to_src, to_tgt in (("source-feat", 1, 0), ("target-feat", 0, 1),
                                     ("centralized-feat", 1, -1)):
            if name not in spans:
                continue
            a, b = spans[name]
            block = g[:, a:b]
            if to_src:
                g_src = block.copy() if g_src is None else g_src + block
            if to_tgt:
                g_tgt = to_tgt * block if g_tgt is None else g_tgt + to_tgt * block
        gx_t = graph.scatter_to_targets(g_tgt) if g_tgt is not None else None
        gx_s = graph.scatter_to_sources(g_src) if g_src is not None else None
        if bip:
            return [gx_t, gx_s] if X is not None else [gx_s]
        if gx_t is None:
            return (gx_s,)
        if gx_s is None:
            return (gx_t,)
        return (gx_t + gx_s,)

    if bip:
        parents = (X, source_X) if X is not None else (source_X,)
    else:
        parents = (X,)
    return _emit(data, parents, vjp, "edge_messages")


# (node side, sign on that side) for every term that is linear in node values
_TERM_SIDES = {
    "source-feat": ((1, "s"),),
    "target-feat": ((1, "t"),),
    "centralized-feat": ((1, "s"), (-1, "t")),
    "source-pos": ((1, "s"),),
    "target-pos": ((1, "t"),),
    "rel-pos": ((1, "s"), (-1, "t")),
}


def edge_linear_op(graph: NeighborGraph, positions: np.ndarray, X: Tensor | None,
                   fset: EdgeFeatureSet, W: Tensor, b: Tensor, source_positions=None,
                   source_X: Tensor | None = None) -> Tensor:
    """``edge_messages_op(...) @ W + b`` without building the message matrix.

    Every term except the distance is a node value gathered to the edge, so
    its product with the matching rows of ``W`` can be taken per node and
    gathered afterwards.  The result equals the materialised product up to
    summation order.  Arguments follow :func:`edge_messages_op`.
    """
    bip = source_X is not None
    Xt = X
    Xs = source_X if bip else X
    P_t = np.asarray(positions)
    P_s = P_t if source_positions is None else np.asarray(source_positions)
    feats = set(fset.features)
    if feats & {"source-feat", "centralized-feat"} and Xs is None:
        raise ValueError(f"feature terms {fset.features} need source node features, none given")
    if feats & {"target-feat", "centralized-feat"} and Xt is None:
        raise ValueError(f"feature terms {fset.features} need target node features, none given")
    ref = Xt if Xt is not None else Xs
    feat_dim = ref.cols if ref is not None else 0
    pos_dim = P_t.shape[1]
    if W.rows != fset.width(feat_dim, pos_dim):
        raise ShapeError(f"weight has {W.rows} rows, messages are {fset.width(feat_dim, pos_dim)} wide")
    Wd = W.data
    d = Wd.shape[1]
    src, tgt = graph.sources, graph.targets
    # (term, weight rows, node values, node side, sign)
    parts = []
    col = 0
    dist_row = None
    for name in fset.features:
        w = fset.term_width(name, feat_dim, pos_dim)
        if name == "distance":
            dist_row = col
        else:
            for sign, side in _TERM_SIDES[name]:
                is_feat = name in _FEAT_TERMS
                vals = (Xs if side == "s" else Xt) if is_feat else (P_s if side == "s" else P_t)
                parts.append((name, slice(col, col + w), vals, side, sign))
        col += w

    def _arr(v):
        return v.data if isinstance(v, Tensor) else v

    node = {"s": np.zeros((graph.num_sources, d)), "t": np.zeros((graph.V, d))}
    for _, rows, vals, side, sign in parts:
        contrib = _arr(vals) @ Wd[rows]
        if sign > 0:
            node[side] += contrib
        else:
            node[side] -= contrib
    out = node["t"][tgt] if graph.uniform_degree is None else np.repeat(node["t"], graph.uniform_degree, axis=0)
    out += node["s"][src]
    out += b.data
    dist = None
    if dist_row is not None:
        rel = P_s[src] - P_t[tgt]
        dist = np.sqrt(np.einsum("ij,ij->i", rel, rel))[:, None]
        out += dist * Wd[dist_row]

    def vjp(g):
        g_node = {"s": graph.scatter_to_sources(g), "t": graph.scatter_to_targets(g)}
        gW = np.zeros_like(Wd)
        gXt = None
        gXs = None
        for name, rows, vals, side, sign in parts:
            gn = g_node[side] if sign > 0 else -g_node[side]
            gW[rows] += _arr(vals).T @ gn
            if isinstance(vals, Tensor):
                gx = gn @ Wd[rows].T
                if side == "s" and bip:
                    gXs = gx if gXs is None else gXs + gx
                else:
                    gXt = gx if gXt is None else gXt + gx
        if dist is not None:
            gW[dist_row] = dist[:, 0] @ g
        grads = [gXt] if Xt is not None else []
        if bip:
            grads.append(gXs)
        return grads + [gW, g_node["t"].sum(axis=0, keepdims=True)]

    parents = [t for t in (Xt, source_X if bip else None) if t is not None]
    return _emit(out, (*parents, W, b), vjp, "edge_linear")


def edge_aggregate_op(graph: NeighborGraph, edge_vals: Tensor, aggs: Sequence[str]) -> Tensor:
    """Differentiable :func:`aggregate_edge_materialized`.

    Max/min route the whole gradient to the first extremal edge of each
    (target, column); mean splits it evenly.
    """
    aggs = check_aggregators(aggs)
    vals = edge_vals.data
    out = aggregate_edge_materialized(graph, vals, aggs)
    d = vals.shape[1]

    def vjp(g):
        ge = np.zeros_like(vals)
        cols = np.arange(d)
        for a, agg in enumerate(aggs):
            block = g[:, a * d:(a + 1) * d]
            if agg == "mean":
                ge += (block / graph.degrees[:, None])[graph.targets]
            else:
                arg = _first_arg_edges(graph, vals, out[:, a * d:(a + 1) * d], agg)
                # one edge per (target, column), so the fancy update has no repeats
                ge[arg, cols] += block
        return (ge,)

    return _emit(out, (edge_vals,), vjp, "edge_aggregate")


def vertex_aggregate_op(graph: NeighborGraph, node_vals: Tensor, aggs: Sequence[str]) -> Tensor:
    """Differentiable :func:`aggregate_vertex`."""
    aggs = check_aggregators(aggs)
    vals = node_vals.data
    out, argsrc = aggregate_vertex(graph, vals, aggs, return_argsrc=True)
    n, d = vals.shape

    def vjp(g):
        gx = np.zeros(n * d)
        cols = np.arange(d)
        for a, agg in enumerate(aggs):
            block = g[:, a * d:(a + 1) * d]
            if agg == "mean":
                per_edge = (block / graph.degrees[:, None])[graph.targets]
                gx += graph.scatter_to_sources(per_edge).ravel()
            else:
                flat = (argsrc[agg] * d + cols).ravel()
                gx += np.bincount(flat, weights=block.ravel(), minlength=n * d)
        return (gx.reshape(n, d),)

    return _emit(out, (node_vals,), vjp, "vertex_aggregate")


def segment_max_op(offsets: np.ndarray, X: Tensor) -> Tensor:
    """Column-wise max over consecutive row segments (per-cloud readout)."""
    offsets = np.asarray(offsets, dtype=np.int64)
    g = NeighborGraph(offsets, np.arange(offsets[-1]), X.rows)
    return edge_aggregate_op(g, X, ("max",))


def segment_mean_op(offsets: np.ndarray, X: Tensor) -> Tensor:
    offsets = np.asarray(offsets, dtype=np.int64)
    g = NeighborGraph(offsets, np.arange(offsets[-1]), X.rows)
    return edge_aggregate_op(g, X, ("mean",))
