"""Dense 2-D tensors with a minimal reverse-mode differentiation tape.

Every value is a 2-D numpy array. Operations executed while a :class:`Tape`
is active are recorded together with a closure computing the vector-Jacobian
product; :func:`backward` replays them in reverse.  Outside a tape the same
functions are plain numpy computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "NotOnTapeError",
    "NonDeterministicError",
    "backward",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "leaky_relu",
    "relu",
    "concat",
    "gather_rows",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "batch_norm",
    "BatchNormState",
    "MlpSpec",
    "init_mlp",
    "mlp_forward",
    "mlp_infer",
    "apply_activation_",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NotOnTapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    """A 2-D array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; tapes do not nest (the innermost active tape
    receives the records).
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, parents, vjp) -> None:
        self._index[id(out)] = len(self.records)
        self.records.append(_Record(out, tuple(parents), vjp))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._index and self.records[self._index[id(t)]].out is t


def _current_tape() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction propagates any NaN/Inf without a boolean temporary
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {what}")


def _emit(data: np.ndarray, parents: Iterable[Tensor], vjp, what: str) -> Tensor:
    _check_finite(data, what)
    parents = tuple(parents)
    tape = _current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(out, parents, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``.

    Gradient buffers of every tensor touched by the tape are reset before
    accumulation (an untouched buffer reads as zeros).  Returns the gradients
    of the leaf tensors: those with ``requires_grad`` that were not produced
    by a recorded op.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise NotOnTapeError("loss was not recorded on this tape")
    stop = tape._index[id(loss)]
    produced = {id(r.out) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in tape.records[: stop + 1]:
        rec.out.grad = None
        for p in rec.parents:
            p.grad = None
            if p.requires_grad and id(p) not in produced:
                leaves[id(p)] = p
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records[: stop + 1]):
        g = rec.out.grad
        if g is None:
            continue
        for p, gp in zip(rec.parents, rec.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if p.grad is None:
                # accumulation below never works in place, so aliasing gp is safe
                p.grad = gp if gp.shape == p.shape else np.broadcast_to(gp, p.shape).copy()
            else:
                p.grad = p.grad + gp
        rec.out.grad = None if rec.out is not loss else rec.out.grad
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return {t: t.grad for t in leaves.values()}


# -- elementwise and linear algebra ------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with a row-vector bias."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.cols != w.rows or b.shape != (1, w.cols):
        raise ShapeError(f"linear shape mismatch {x.shape} @ {w.shape} + {b.shape}")
    X, W = x.data, w.data
    out = X @ W
    out += b.data
    return _emit(out, (x, w, b),
                 lambda g: (g @ W.T, X.T @ g, g.sum(axis=0, keepdims=True)), "linear")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    return _emit(
        A * B, (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)), "mul",
    )


def _leak(x: np.ndarray, slope: float) -> np.ndarray:
    # max(x, slope * x) equals the leaky rectifier for 0 <= slope <= 1
    out = x * slope
    np.maximum(out, x, out=out)
    return out


def _leak_grad(g: np.ndarray, slope: float, negative: np.ndarray) -> np.ndarray:
    # a lookup on the mask avoids masked ufuncs, which branch per element
    scale = np.take(np.array([1.0, slope], dtype=g.dtype), negative.view(np.uint8))
    scale *= g
    return scale


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    X = x.data
    neg = X < 0
    return _emit(_leak(X, slope), (x,), lambda g: (_leak_grad(g, slope, neg),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation."""
    parts = [_as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat row counts differ: {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def vjp(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _emit(np.concatenate([p.data for p in parts], axis=1), parts, vjp, "concat")


def scatter_add_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def gather_rows(x: Tensor, index: np.ndarray, scatter=None) -> Tensor:
    """Row gather ``x[index]``.

    ``scatter`` optionally supplies a precomputed function ``g -> x-shaped``
    implementing the transpose of the gather.
    """
    index = np.asarray(index, dtype=np.int64)
    n = x.rows

    def vjp(g):
        if scatter is not None:
            return (scatter(g),)
        return (scatter_add_rows(g, index, n),)

    return _emit(x.data[index], (x,), vjp, "gather_rows")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(
        np.array([[x.data.sum()]]), (x,),
        lambda g: (np.full(shape, g[0, 0]),), "sum_all",
    )


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return _emit(
        np.array([[x.data.mean()]]), (x,),
        lambda g: (np.full(shape, g[0, 0] / n),), "mean_all",
    )


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    Z = logits.data
    if labels.shape != (Z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs logits {Z.shape}")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(Z.shape[0])
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g[0, 0] / Z.shape[0]),)

    return _emit(np.array([[loss]]), (logits,), vjp, "cross_entropy")


# -- batch normalisation -----------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics; updated in place by training-mode forward passes."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros((1, width)), np.ones((1, width)))


def _bn_stats(X: np.ndarray, state: BatchNormState, train: bool):
    if train:
        if X.shape[0] < 2:
            raise ShapeError("training-mode batch norm needs at least 2 rows")
        mu = X.mean(axis=0, keepdims=True)
        xc = X - mu
        var = np.einsum("ij,ij->j", xc, xc)[None, :] / X.shape[0]
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * var
    else:
        mu, var = state.mean, state.var
        xc = X - mu
    inv = 1.0 / np.sqrt(var + state.eps)
    xc *= inv
    return xc, inv


def _bn_input_grad(g: np.ndarray, xhat: np.ndarray, G: np.ndarray, inv: np.ndarray,
                   train: bool, dbeta: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    # works in place on g, which the caller owns
    if train:
        n = g.shape[0]
        g -= dbeta / n
        g -= xhat * (dgamma / n)
    g *= G * inv
    return g


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool,
               slope: float | None = None) -> Tensor:
    """Normalise each column over the row (node or edge) axis.

    With ``slope`` set, a leaky rectifier is fused onto the output.
    """
    xhat, inv = _bn_stats(x.data, state, train)
    G = gamma.data
    out = xhat * G
    out += beta.data
    neg = None
    if slope is not None:
        neg = out < 0
        out = _leak(out, slope)

    def vjp(g):
        g = _leak_grad(g, slope, neg) if slope is not None else g.copy()
        dbeta = g.sum(axis=0, keepdims=True)
        dgamma = np.einsum("ij,ij->j", g, xhat)[None, :]
        return _bn_input_grad(g, xhat, G, inv, train, dbeta, dgamma), dgamma, dbeta

    return _emit(out, (x, gamma, beta), vjp, "batch_norm")


# -- MLPs --------------------------------------------------------------------

ACTIVATIONS = ("leaky-relu", "relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Stack of linear -> [batch norm] -> activation layers.

    ``widths`` lists the input width followed by each layer's output width.
    When ``activate_last`` is false the final layer is purely linear.
    """

    widths: tuple[int, ...]
    activation: str = "leaky-relu"
    slope: float = 0.2
    batch_norm: bool = True
    activate_last: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"MLP widths must hold >= 2 positive entries, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def layer_has_bn(self, i: int) -> bool:
        return self.batch_norm and (self.activate_last or i < self.depth - 1)

    def layer_has_act(self, i: int) -> bool:
        return self.activate_last or i < self.depth - 1

    def param_count(self) -> int:
        n = 0
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            n += a * b + b
            if self.layer_has_bn(i):
                n += 2 * b
        return n


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "mlp") -> list[dict]:
    """Uniform(+-sqrt(1/fan_in)) weights and biases; unit/zero batch-norm affine."""
    params = []
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = math.sqrt(1.0 / a)
        layer = {
            "W": Tensor(rng.uniform(-bound, bound, (a, b)), True, f"{prefix}.{i}.W"),
            "b": Tensor(rng.uniform(-bound, bound, (1, b)), True, f"{prefix}.{i}.b"),
        }
        if spec.layer_has_bn(i):
            layer["gamma"] = Tensor(np.ones((1, b)), True, f"{prefix}.{i}.gamma")
            layer["beta"] = Tensor(np.zeros((1, b)), True, f"{prefix}.{i}.beta")
            layer["bn"] = BatchNormState.fresh(b)
        params.append(layer)
    return params


def _act(spec: MlpSpec, h: Tensor) -> Tensor:
    if spec.activation == "leaky-relu":
        return leaky_relu(h, spec.slope)
    if spec.activation == "relu":
        return relu(h)
    return h


def mlp_forward(spec: MlpSpec, X: Tensor, params: list[dict], mode: str = "frozen",
                first_linear_done: bool = False) -> Tensor:
    """Apply the MLP row-wise. ``mode`` is ``"train"`` or ``"frozen"``.

    With ``first_linear_done`` the caller has already applied the first
    layer's weights and bias, and ``X`` holds that layer's pre-activation.
    """
    if mode not in ("train", "frozen"):
        raise ValueError(f"mode must be 'train' or 'frozen', got {mode!r}")
    want = spec.widths[1] if first_linear_done else spec.in_width
    if X.cols != want:
        raise ShapeError(f"MLP expects {want} input columns, got {X.cols}")
    if len(params) != spec.depth:
        raise ShapeError(f"MLP of depth {spec.depth} given {len(params)} parameter layers")
    h = X
    for i, layer in enumerate(params):
        if layer["W"].shape != (spec.widths[i], spec.widths[i + 1]):
            raise ShapeError(f"layer {i} weight shape {layer['W'].shape} does not match spec")
        if i > 0 or not first_linear_done:
            h = linear(h, layer["W"], layer["b"])
        act = spec.layer_has_act(i) and spec.activation != "identity"
        if spec.layer_has_bn(i) and act:
            slope = spec.slope if spec.activation == "leaky-relu" else 0.0
            h = batch_norm(h, layer["gamma"], layer["beta"], layer["bn"], mode == "train", slope)
            continue
        if spec.layer_has_bn(i):
            h = batch_norm(h, layer["gamma"], layer["beta"], layer["bn"], mode == "train")
        if act:
            h = _act(spec, h)
    return h


_CHUNK_ROWS = 8192


def apply_activation_(spec: MlpSpec, h: np.ndarray, counter=None) -> None:
    """In-place activation; scratch masks are bounded by a row chunk."""
    if spec.activation == "identity":
        return
    slope = spec.slope if spec.activation == "leaky-relu" else 0.0
    for start in range(0, h.shape[0], _CHUNK_ROWS):
        block = h[start:start + _CHUNK_ROWS]
        if counter is not None:
            counter.note(block.size, block.dtype)
        np.maximum(block, block * slope, out=block)
        if counter is not None:
            counter.release(block.size, block.dtype)


def mlp_infer(spec: MlpSpec, X: np.ndarray, params: list[dict], counter=None,
              dtype=None) -> np.ndarray:
    """Frozen-mode MLP on raw arrays with in-place post-processing.

    Allocates one output buffer per layer (released as soon as the next layer
    has consumed it) and no other full-size temporaries.
    """
    from .kernels import NullCounter

    counter = counter or NullCounter()
    dtype = np.dtype(dtype or X.dtype)
    h = X
    owned = False
    for i, layer in enumerate(params):
        W = layer["W"].data.astype(dtype, copy=False)
        nxt = counter.empty((h.shape[0], W.shape[1]), dtype)
        np.matmul(h, W, out=nxt)
        if owned:
            counter.free(h)
        h, owned = nxt, True
        h += layer["b"].data.astype(dtype, copy=False)
        if spec.layer_has_bn(i):
            st = layer["bn"]
            scale = layer["gamma"].data / np.sqrt(st.var + st.eps)
            shift = layer["beta"].data - st.mean * scale
            h *= scale.astype(dtype, copy=False)
            h += shift.astype(dtype, copy=False)
        if spec.layer_has_act(i):
            apply_activation_(spec, h, counter)
    if not owned:
        h = counter.adopt(h.copy())
    if not np.isfinite(h).all():
        raise NonFiniteError("non-finite MLP output")
    return h


# -- finite differences ------------------------------------------------------


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5, floor: float = 1e-8) -> float:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    Returns the largest per-parameter relative error
    ``|g_ad - g_fd|_inf / max(|g_ad|_inf, |g_fd|_inf, floor)``, norms taken per
    parameter tensor.  Raise ``floor`` for parameters whose true gradient is
    exactly zero (a bias ahead of training-mode batch norm), where difference
    roundoff would otherwise dominate the ratio.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape()
    with tape:
        loss = f()
    base = loss.item()
    if f().item() != base:
        raise NonDeterministicError("f returned different values for identical inputs")
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            g_fd[i] = (up - down) / (2 * step)
        g_fd = g_fd.reshape(p.shape)
        denom = max(np.abs(g_ad).max(), np.abs(g_fd).max(), floor)
        worst = max(worst, float(np.abs(g_ad - g_fd).max() / denom))
    return worst
