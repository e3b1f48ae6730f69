"""Slow reference implementations used as test oracles.

Each oracle works point by point or edge by edge with plain Python loops so
that it shares no vectorised code path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def knn_rows(P, k):
    n = len(P)
    rows = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            dx, dy, dz = (P[j][0] - P[i][0]), (P[j][1] - P[i][1]), (P[j][2] - P[i][2])
            cand.append(((dx * dx + dy * dy) + dz * dz, j))
        cand.sort()
        rows.append(sorted(j for _, j in cand[:k]))
    return rows


def radius_rows(P, r, cap, centers=None):
    centers = range(len(P)) if centers is None else centers
    rows = []
    for i in centers:
        cand = []
        for j in range(len(P)):
            if j == i:
                continue
            d = math.dist(P[i], P[j])
            if d <= r:
                cand.append((d, j))
        cand.sort()
        chosen = sorted(j for _, j in cand[:cap])
        rows.append(chosen if chosen else [i])
    return rows


def fps(P, m, start=0):
    chosen = [start]
    best = [math.dist(P[start], p) for p in P]
    while len(chosen) < m:
        far = max(range(len(P)), key=lambda j: (best[j], -j))
        chosen.append(far)
        best = [min(b, math.dist(P[far], p)) for b, p in zip(best, P)]
    return chosen


def mlp_row(spec, params, x):
    """Frozen-mode MLP on one row vector."""
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(params):
        h = h @ layer["W"].data + layer["b"].data[0]
        if spec.layer_has_bn(i):
            st = layer["bn"]
            h = (h - st.mean[0]) / np.sqrt(st.var[0] + st.eps) * layer["gamma"].data[0] + layer["beta"].data[0]
        if spec.layer_has_act(i):
            if spec.activation == "leaky-relu":
                h = np.array([v if v >= 0 else spec.slope * v for v in h])
            elif spec.activation == "relu":
                h = np.array([max(v, 0.0) for v in h])
    return h


def reduce_rows(vals, agg):
    vals = np.asarray(vals)
    if agg == "max":
        return vals.max(axis=0)
    if agg == "min":
        return vals.min(axis=0)
    return np.array([math.fsum(c) / len(c) for c in vals.T])


def message(terms, x_s, x_t, p_s, p_t):
    out = []
    for name in terms:
        if name == "source-feat":
            out += list(x_s)
        elif name == "target-feat":
            out += list(x_t)
        elif name == "centralized-feat":
            out += [a - b for a, b in zip(x_s, x_t)]
        elif name == "source-pos":
            out += list(p_s)
        elif name == "target-pos":
            out += list(p_t)
        elif name == "rel-pos":
            out += [a - b for a, b in zip(p_s, p_t)]
        elif name == "distance":
            out.append(math.dist(p_s, p_t))
    return out


def edge_layer(layer, rows, P, X, terms, source_P=None, source_X=None, centers=None):
    """Per-edge evaluation of ``agg_j MLP(message(j -> i))``."""
    spec = layer.spec
    sP = P if source_P is None else source_P
    sX = X if source_X is None else source_X
    out = []
    for t, row in enumerate(rows):
        i = t if centers is None else centers[t]
        msgs = []
        for j in row:
            xs = [] if sX is None else sX[j]
            xt = [] if X is None else X[i]
            msgs.append(mlp_row(spec.mlp, layer.mlp, message(terms, xs, xt, sP[j], P[i])))
        out.append(np.concatenate([reduce_rows(msgs, a) for a in spec.aggregators]))
    return np.array(out)


def linmem_layer(layer, rows, P):
    spec = layer.spec
    second = layer.mlp if layer.mlp2 is None else layer.mlp2
    out = []
    for i, row in enumerate(rows):
        h1 = [mlp_row(spec.mlp, layer.mlp, P[j]) for j in row]
        h2 = mlp_row(spec.mlp, second, P[i])
        out.append(np.concatenate([reduce_rows(h1, a) - h2 for a in spec.aggregators]))
    return np.array(out)
