import numpy as np
import pytest

from pcgnn.geometry import knn_graph, radius_graph
from pcgnn.kernels import EdgeFeatureSet, FEATURE_ORDER, MemoryCounter, aggregate_edge_materialized
from pcgnn.layers import LayerSpec, block_spec, make_layer
from pcgnn.tensor import (MlpSpec, ShapeError, Tape, Tensor, backward, finite_difference_check, mlp_infer,
                          mul, sum_all)

from oracles import edge_layer, linmem_layer, radius_rows


def randomise(layer, rng):
    """Non-trivial frozen batch-norm statistics and affine parameters."""
    for mlp in (layer.mlp, layer.mlp2 or []):
        for p in mlp:
            if "bn" in p:
                p["bn"].mean = rng.normal(size=p["bn"].mean.shape)
                p["bn"].var = rng.uniform(0.5, 2.0, size=p["bn"].var.shape)
                p["gamma"].data = rng.normal(size=p["gamma"].shape)
                p["beta"].data = rng.normal(size=p["beta"].shape)
            p["b"].data = rng.normal(size=p["b"].shape)
    return layer


def instance(seed, n=None, d=4):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(8, 33))
    P = rng.normal(size=(n, 3))
    X = rng.normal(size=(n, d))
    k = int(rng.integers(1, min(n, 9)))
    return rng, P, X, knn_graph(P, k)


def _identity(width):
    return MlpSpec((width, width), activation="identity", batch_norm=False)


def _set_identity(layer):
    layer.mlp[0]["W"].data = np.eye(layer.mlp[0]["W"].rows)
    layer.mlp[0]["b"].data[:] = 0.0


def test_edgeconv_identity_example():
    spec = LayerSpec("edgeconv", 1, _identity(2))
    layer = make_layer(spec, np.random.default_rng(0))
    _set_identity(layer)
    g = knn_graph(np.array([[0.0, 0, 0], [1, 0, 0]]), 1)
    out = layer.infer(g, np.zeros((2, 3)), np.array([[1.0], [2.0]]))
    assert out[0].tolist() == [1.0, 1.0]


def test_edgeconv_constant_features_give_constant_output():
    rng, P, _, g = instance(1)
    layer = randomise(make_layer(block_spec("edgeconv", 4, 8), rng), rng)
    X = np.tile(rng.normal(size=(1, 4)), (len(P), 1))
    out = layer.infer(g, P, X)
    assert np.abs(out - out[0]).max() <= 1e-12


GEO_SETS = [
    ("target-pos", "rel-pos", "distance"),
    ("source-feat", "centralized-feat", "rel-pos", "source-pos", "distance"),
    ("target-feat", "centralized-feat"),
    ("source-pos",),
]


@pytest.mark.parametrize("seed", range(10))
def test_formula_oracles(seed):
    rng, P, X, g = instance(seed)
    rows = [r.tolist() for r in g.rows()]
    specs = [
        block_spec("edgeconv", 4, 6, depth=2),
        block_spec("simple-conv", 4, 6, aggregators=("max", "mean")),
        block_spec("simple-conv", 4, 6, features=("source-feat", "source-pos")),
        block_spec("geo-extractor", 4, 6, features=GEO_SETS[seed % len(GEO_SETS)], aggregators=("max", "mean", "min")),
    ]
    for spec in specs:
        layer = randomise(make_layer(spec, rng), rng)
        ref = edge_layer(layer, rows, P, X, spec.features.features)
        assert np.abs(layer.infer(g, P, X) - ref).max() <= 1e-10, spec.kind
        assert np.abs(layer.forward(g, P, Tensor(X)).data - ref).max() <= 1e-10, spec.kind
    for mode in ("shared", "separate"):
        spec = block_spec("linmem-extractor", 3, 6, linmem_weights=mode, aggregators=("max", "min"))
        layer = randomise(make_layer(spec, rng), rng)
        ref = linmem_layer(layer, rows, P)
        assert np.abs(layer.infer(g, P, None) - ref).max() <= 1e-10
        assert np.abs(layer.forward(g, P, None).data - ref).max() <= 1e-10


def _sa(radius, cap, sampling="none", samples=None, width=4, identity=False):
    if identity:
        mlp = _identity(width)
    else:
        mlp = MlpSpec((width, 5))
    return LayerSpec("pnpp-sa", 1, mlp, aggregators=("max",), sampling=sampling, samples=samples,
                     radius=radius, cap=cap)


def test_pnpp_identity_full_radius_example():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(8, 3))
    X = rng.normal(size=(8, 1))
    layer = make_layer(_sa(100.0, 7, identity=True), rng)
    _set_identity(layer)
    _, out, _ = layer.infer(P, X, np.array([0, 8]))
    for i in range(8):
        msgs = [np.r_[X[j], P[j] - P[i]] for j in range(8) if j != i]
        assert np.array_equal(out[i], np.max(msgs, axis=0))


@pytest.mark.parametrize("sampling", ["fps", "random", "none"])
def test_pnpp_matches_oracle(sampling):
    rng = np.random.default_rng(3)
    P = rng.uniform(-1, 1, size=(40, 3))
    X = rng.normal(size=(40, 1))
    layer = randomise(make_layer(_sa(0.6, 5, sampling, 10 if sampling != "none" else None), rng), rng)
    offsets = np.array([0, 40])
    grp = layer.group(P, offsets)
    rows = radius_rows(P.tolist(), 0.6, 5, grp.centers.tolist())
    ref = edge_layer(layer, rows, P, None, ("source-feat", "rel-pos"), source_X=X, centers=grp.centers.tolist())
    Pc, out, new_off = layer.infer(P, X, offsets)
    assert np.abs(out - ref).max() <= 1e-10
    assert np.array_equal(Pc, P[grp.centers]) and new_off.tolist() == [0, len(grp.centers)]
    _, out_t, _ = layer.forward(P, Tensor(X), offsets)
    assert np.abs(out_t.data - ref).max() <= 1e-10


def test_pnpp_isolated_centroid_uses_zero_offset():
    P = np.array([[0.0, 0, 0], [10, 0, 0], [0.1, 0, 0]])
    X = np.array([[1.0], [2.0], [3.0]])
    layer = make_layer(_sa(0.5, 2, identity=True), np.random.default_rng(0))
    _set_identity(layer)
    _, out, _ = layer.infer(P, X, np.array([0, 3]))
    assert out[1].tolist() == [2.0, 0.0, 0.0, 0.0]


def test_pnpp_sampling_errors_and_radius_monotone():
    P = np.random.default_rng(4).normal(size=(20, 3))
    layer = make_layer(_sa(0.5, 4, "fps", 30), np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer.group(P, np.array([0, 20]))
    for r in (0.3, 0.6, 1.2):
        small = radius_graph(P, r, 19)
        big = radius_graph(P, 2 * r, 19)
        for a, b in zip(small.rows(), big.rows()):
            assert set(a.tolist()) - set(range(20)) == set()
            assert len(b) >= len(a) or (len(a) == 1 and a[0] in range(20))


def test_simple_conv_identity_is_neighbourhood_max():
    rng, P, X, g = instance(5)
    layer = make_layer(LayerSpec("simple-conv", 4, _identity(4)), rng)
    _set_identity(layer)
    out = layer.infer(g, P, X)
    assert np.array_equal(out, np.array([X[r].max(axis=0) for r in g.rows()]))


@pytest.mark.parametrize("seed", range(5))
def test_simple_conv_equals_edge_path_bit_exact(seed):
    rng, P, X, g = instance(seed, n=64)
    layer = randomise(make_layer(block_spec("simple-conv", 4, 16), rng), rng)
    edge = aggregate_edge_materialized(g, mlp_infer(layer.spec.mlp, X[g.sources], layer.mlp), ["max"])
    assert np.array_equal(layer.infer(g, P, X), edge)


@pytest.mark.parametrize("features", [("source-feat",), ("source-feat", "source-pos")])
def test_source_only_geo_equals_simple_conv_bit_exact(features):
    rng, P, X, g = instance(7, n=64)
    simple = randomise(make_layer(block_spec("simple-conv", 4, 16, features=features), rng), rng)
    geo = make_layer(block_spec("geo-extractor", 4, 16, features=features), rng)
    geo.load_state({k.replace(simple.name, geo.name): v for k, v in simple.state_dict().items()})
    assert np.array_equal(geo.infer(g, P, X), simple.infer(g, P, X))


def test_linmem_shared_constant_cloud_is_zero():
    P = np.tile([[0.3, -0.2, 0.5]], (10, 1))
    g = NeighborGraph_complete(10)
    layer = randomise(make_layer(block_spec("linmem-extractor", 3, 8, linmem_weights="shared"),
                                 np.random.default_rng(0)), np.random.default_rng(1))
    assert np.array_equal(layer.infer(g, P, None), np.zeros((10, 8)))


def NeighborGraph_complete(n):
    from pcgnn.kernels import NeighborGraph

    return NeighborGraph.from_rows([[j for j in range(n) if j != i] for i in range(n)])


def test_linmem_separate_with_zero_second_mlp_is_simple_conv_on_positions():
    rng, P, _, g = instance(8)
    lin = randomise(make_layer(block_spec("linmem-extractor", 3, 8, linmem_weights="separate"), rng), rng)
    for p in lin.mlp2:
        p["W"].data[:] = 0.0
        p["b"].data[:] = 0.0
        p["gamma"].data[:] = 0.0
        p["beta"].data[:] = 0.0
    simple = make_layer(block_spec("simple-conv", 3, 8), rng)
    for dst, src in zip(simple.mlp, lin.mlp):
        for key in ("W", "b", "gamma", "beta"):
            dst[key].data = src[key].data.copy()
        dst["bn"].mean, dst["bn"].var = src["bn"].mean.copy(), src["bn"].var.copy()
    assert np.array_equal(lin.infer(g, P, None), simple.infer(g, P, P))


def test_spec_validation():
    with pytest.raises(ValueError):
        block_spec("simple-conv", 4, 8, features=("source-feat", "rel-pos"))
    with pytest.raises(ValueError):
        block_spec("edgeconv", 4, 8, features=("source-feat",))
    with pytest.raises(ValueError):
        block_spec("linmem-extractor", 3, 8)
    with pytest.raises(ValueError):
        block_spec("simple-conv", 4, 8, linmem_weights="shared")
    with pytest.raises(ValueError):
        block_spec("geo-extractor", 4, 8)
    with pytest.raises(ShapeError):
        LayerSpec("simple-conv", 4, MlpSpec((5, 8)))
    with pytest.raises(ValueError):
        LayerSpec("pnpp-sa", 1, MlpSpec((4, 8)), radius=None, cap=3)


def _tensors(layer):
    return layer.parameters()


GRAD_SPECS = [
    lambda: block_spec("edgeconv", 4, 6, depth=2),
    lambda: block_spec("simple-conv", 4, 6, aggregators=("max", "mean")),
    lambda: block_spec("geo-extractor", 4, 6, features=FEATURE_ORDER, aggregators=("max", "min")),
    lambda: block_spec("linmem-extractor", 3, 6, linmem_weights="shared"),
    lambda: block_spec("linmem-extractor", 3, 6, linmem_weights="separate", aggregators=("max", "mean")),
]


@pytest.mark.parametrize("make", GRAD_SPECS)
@pytest.mark.parametrize("train", [False, True])
def test_layer_gradients(make, train):
    spec = make()
    rng, P, X, g = instance(11, n=64)
    layer = randomise(make_layer(spec, rng), rng)
    Xt = None if spec.kind == "linmem-extractor" else Tensor(X, True)
    C = rng.normal(size=(64, spec.out_width))
    saved = [(p["bn"].mean.copy(), p["bn"].var.copy()) for m in (layer.mlp, layer.mlp2 or []) for p in m if "bn" in p]

    def f():
        bns = [p["bn"] for m in (layer.mlp, layer.mlp2 or []) for p in m if "bn" in p]
        for st, (mu, var) in zip(bns, saved):
            st.mean, st.var = mu.copy(), var.copy()
        return sum_all(mul(layer.forward(g, P, Xt, train), Tensor(C)))

    # a bias feeding train-mode batch norm cancels in the normalisation, so its
    # true gradient is zero and a relative comparison would only measure roundoff
    dead = {id(p["b"]) for m in (layer.mlp, layer.mlp2 or []) for p in m if "bn" in p} if train else set()
    leaves = [t for t in layer.parameters() if id(t) not in dead] + ([Xt] if Xt is not None else [])
    assert finite_difference_check(f, leaves, step=1e-6) <= 1e-4
    if dead:
        tape = Tape()
        with tape:
            loss = f()
        grads = backward(tape, loss)
        assert all(np.abs(grads[t]).max() <= 1e-9 for t in layer.parameters() if id(t) in dead)


def test_pnpp_gradients():
    rng = np.random.default_rng(12)
    P = rng.uniform(-1, 1, size=(48, 3))
    X = Tensor(rng.normal(size=(48, 1)), True)
    layer = randomise(make_layer(_sa(0.7, 6, "fps", 12), rng), rng)
    C = rng.normal(size=(12, 5))
    f = lambda: sum_all(mul(layer.forward(P, X, np.array([0, 48]))[1], Tensor(C)))
    assert finite_difference_check(f, layer.parameters() + [X], step=1e-6) <= 1e-4


def test_shared_linmem_gradient_is_sum_of_both_sites():
    rng, P, _, g = instance(13, n=40)
    shared = randomise(make_layer(block_spec("linmem-extractor", 3, 6, linmem_weights="shared"), rng), rng)
    sep = make_layer(block_spec("linmem-extractor", 3, 6, linmem_weights="separate"), rng)
    for mlp in (sep.mlp, sep.mlp2):
        for dst, src in zip(mlp, shared.mlp):
            for key in ("W", "b", "gamma", "beta"):
                dst[key].data = src[key].data.copy()
            dst["bn"].mean, dst["bn"].var = src["bn"].mean.copy(), src["bn"].var.copy()
    C = Tensor(rng.normal(size=(40, 6)))
    grads = []
    for layer in (shared, sep):
        tape = Tape()
        with tape:
            out = sum_all(mul(layer.forward(g, P, None), C))
        grads.append(backward(tape, out))
    for i, p in enumerate(shared.mlp):
        for key in ("W", "b", "gamma", "beta"):
            total = grads[1][sep.mlp[i][key]] + grads[1][sep.mlp2[i][key]]
            assert np.allclose(grads[0][p[key]], total, atol=1e-12)


ALL_KINDS = GRAD_SPECS + [lambda: block_spec("simple-conv", 4, 6, features=("source-feat", "source-pos"))]


@pytest.mark.parametrize("make", ALL_KINDS)
def test_permutation_invariance(make):
    spec = make()
    rng, P, X, _ = instance(14, n=48)
    layer = randomise(make_layer(spec, rng), rng)
    perm = rng.permutation(48)
    feats = None if spec.kind == "linmem-extractor" else X
    a = layer.infer(knn_graph(P, 10), P, feats)
    b = layer.infer(knn_graph(P[perm], 10), P[perm], None if feats is None else feats[perm])
    assert np.abs(a[perm] - b).max() <= 1e-9 * max(1.0, np.abs(a).max())


def test_transient_memory_ordering():
    rng = np.random.default_rng(15)
    V, k, d = 256, 16, 32
    P = rng.normal(size=(V, 3)).astype(np.float32)
    X = rng.normal(size=(V, d)).astype(np.float32)
    g = knn_graph(P, k)
    peaks = {}
    specs = {
        "linmem": block_spec("linmem-extractor", 3, d, linmem_weights="separate"),
        "simple": block_spec("simple-conv", d, d),
        "geo": block_spec("geo-extractor", d, d, features=("target-feat", "centralized-feat")),
        "edgeconv": block_spec("edgeconv", d, d),
    }
    for name, spec in specs.items():
        c = MemoryCounter()
        make_layer(spec, rng).infer(g, P, None if name == "linmem" else X, c, np.float32)
        peaks[name] = c.peak_floats(np.float32)
    assert peaks["linmem"] <= peaks["simple"] < peaks["geo"]
    assert peaks["geo"] == pytest.approx(peaks["edgeconv"], rel=0.05)
    assert peaks["simple"] <= 3 * V * d
    assert peaks["edgeconv"] >= V * k * d
