"""Minimal reverse-mode differentiation over numpy arrays.

The engine records tensor-level primitives (affine maps, elementwise
activations, concatenation, reductions, segment ops) on an append-only
tape and back-propagates a scalar root through them.  It is deliberately
small: just enough for shallow MLPs, hash-table lookups, rendering
quadrature, and the training losses.

Conventions:
  * batched tensors are 2-D float64 arrays of shape (N, k)
  * vector parameters (biases) are 1-D, scalars have shape ()
  * positions / directions fed into networks are constants; gradients
    flow only into parameters and explicitly-marked leaves
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k


class ContractError(ValueError):
    """A caller violated an operation's contract (shape/kind mismatch)."""


class ParamStore:
    """Named parameter tensors with fixed shapes and stable order."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        old = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ContractError(
                f"shape of {name!r} is immutable: {old.shape} vs {value.shape}")
        self._arrays[name] = value

    def __contains__(self, name):
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def total_size(self) -> int:
        return sum(v.size for v in self._arrays.values())


class Node:
    """One tape entry: a value, its parents, and the vjp closure."""

    __slots__ = ("value", "parents", "vjp", "grad", "param_name")

    def __init__(self, value, parents=(), vjp=None, param_name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only op recorder; nodes are created in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _emit(self, value, parents=(), vjp=None, param_name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), parents, vjp, param_name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable leaf; `name` ties it to a ParamStore entry."""
        return self._emit(value, param_name=name)

    def constant(self, value) -> Node:
        node = self._emit(value)
        node.vjp = False  # marks "gradient never flows here"
        return node

    def backward(self, root: Node, params: ParamStore | None = None):
        """Back-propagate from a scalar root.

        Returns a dict of parameter gradients (zeros for parameters the
        root never touched when `params` is given).
        """
        if root.value.shape != ():
            raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones(())
        grads: dict[str, np.ndarray] = {}
        # nodes were appended in topological order; walk them backwards
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            if node.param_name is not None:
                acc = grads.get(node.param_name)
                grads[node.param_name] = g if acc is None else acc + g
            if node.vjp in (None, False) or not node.parents:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent.vjp is False:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        if params is not None:
            for name, arr in params.items():
                if name not in grads:
                    grads[name] = np.zeros_like(arr)
                else:
                    grads[name] = grads[name].reshape(arr.shape)
        return grads


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def affine(tape: Tape, x: Node, w: Node, b: Node | None = None) -> Node:
    """x @ w (+ b)."""
    y = x.value @ w.value
    if b is not None:
        y = y + b.value

    def vjp(g):
        gx = g @ w.value.T
        gw = x.value.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return tape._emit(y, parents, vjp)


def add(tape: Tape, a: Node, b: Node) -> Node:
    return tape._emit(a.value + b.value, (a, b),
                      lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(tape: Tape, a: Node, b: Node) -> Node:
    return tape._emit(a.value - b.value, (a, b),
                      lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(tape: Tape, a: Node, b: Node) -> Node:
    return tape._emit(a.value * b.value, (a, b),
                      lambda g: (_unbroadcast(g * b.value, a.shape),
                                 _unbroadcast(g * a.value, b.shape)))


def div(tape: Tape, a: Node, b: Node) -> Node:
    y = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * y / b.value, b.shape))

    return tape._emit(y, (a, b), vjp)


def scale(tape: Tape, x: Node, c: float) -> Node:
    return tape._emit(x.value * c, (x,), lambda g: (g * c,))


def add_const(tape: Tape, x: Node, c) -> Node:
    return tape._emit(x.value + c, (x,), lambda g: (_unbroadcast(g, x.shape),))


def neg(tape: Tape, x: Node) -> Node:
    return tape._emit(-x.value, (x,), lambda g: (-g,))


def exp(tape: Tape, x: Node) -> Node:
    y = np.exp(x.value)
    return tape._emit(y, (x,), lambda g: (g * y,))


def log(tape: Tape, x: Node) -> Node:
    return tape._emit(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(tape: Tape, x: Node) -> Node:
    y = np.sqrt(x.value)
    return tape._emit(y, (x,), lambda g: (g * 0.5 / y,))


def absolute(tape: Tape, x: Node) -> Node:
    return tape._emit(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def sigmoid(tape: Tape, x: Node) -> Node:
    y = _k.sigmoid_fwd(x.value)
    return tape._emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(tape: Tape, x: Node, beta: float = 1.0) -> Node:
    """log(1 + exp(beta*x)) / beta, overflow-safe."""
    y, sig = _k.softplus_fwd(x.value, beta)
    return tape._emit(y, (x,), lambda g: (g * sig,))


def maximum_const(tape: Tape, x: Node, c: float) -> Node:
    y = np.maximum(x.value, c)
    return tape._emit(y, (x,), lambda g: (g * (x.value > c),))


def maximum_with(tape: Tape, x: Node, c: np.ndarray) -> Node:
    """Elementwise max against a constant tensor (no gradient into it)."""
    y = np.maximum(x.value, c)
    return tape._emit(y, (x,), lambda g: (g * (x.value > c),))


def minimum_const(tape: Tape, x: Node, c: float) -> Node:
    y = np.minimum(x.value, c)
    return tape._emit(y, (x,), lambda g: (g * (x.value < c),))


def clip(tape: Tape, x: Node, lo: float, hi: float) -> Node:
    y = np.clip(x.value, lo, hi)
    mask = (x.value > lo) & (x.value < hi)
    return tape._emit(y, (x,), lambda g: (g * mask,))


def where_const(tape: Tape, mask: np.ndarray, const, x: Node) -> Node:
    """Select a constant where `mask` is true, `x` elsewhere (no gradient
    through the constant branch)."""
    y = np.where(mask, const, x.value)
    return tape._emit(y, (x,), lambda g: (g * ~mask,))


def concat_cols(tape: Tape, parts: list[Node]) -> Node:
    widths = [p.value.shape[1] for p in parts]
    y = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return tape._emit(y, tuple(parts), vjp)


def cols(tape: Tape, x: Node, start: int, stop: int) -> Node:
    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[:, start:stop] = g
        return (gx,)

    return tape._emit(x.value[:, start:stop], (x,), vjp)


def rows(tape: Tape, x: Node, start: int, stop: int) -> Node:
    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[start:stop] = g
        return (gx,)

    return tape._emit(x.value[start:stop], (x,), vjp)


def gather_rows(tape: Tape, x: Node, index: np.ndarray) -> Node:
    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        return (gx,)

    return tape._emit(x.value[index], (x,), vjp)


def scatter_rows(tape: Tape, x: Node, index: np.ndarray, n_rows: int) -> Node:
    """Place rows of x at `index` inside an (n_rows, k) zero tensor.

    Indices must be unique (each output row written at most once).
    """
    k = x.value.shape[1]
    y = np.zeros((n_rows, k))
    y[index] = x.value

    def vjp(g):
        return (g[index],)

    return tape._emit(y, (x,), vjp)


def sum_all(tape: Tape, x: Node) -> Node:
    return tape._emit(x.value.sum(), (x,),
                      lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(tape: Tape, x: Node) -> Node:
    n = x.value.size
    return tape._emit(x.value.mean(), (x,),
                      lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_cols(tape: Tape, x: Node) -> Node:
    """Row-wise sum: (N, k) -> (N, 1)."""
    return tape._emit(x.value.sum(axis=1, keepdims=True), (x,),
                      lambda g: (np.broadcast_to(g, x.shape).copy(),))


def segment_sum(tape: Tape, x: Node, seg_ids: np.ndarray, n_seg: int) -> Node:
    """Sum rows of (N, k) into (n_seg, k) buckets given per-row segment ids."""
    k = x.value.shape[1]
    y = np.zeros((n_seg, k))
    np.add.at(y, seg_ids, x.value)

    def vjp(g):
        return (g[seg_ids],)

    return tape._emit(y, (x,), vjp)


def segment_excl_cumprod(tape: Tape, x: Node, starts: np.ndarray) -> Node:
    """Per-segment exclusive cumulative product of a column vector (N, 1).

    `starts` holds the first index of each segment (ascending, first is 0).
    Entry i receives the product of all earlier entries in its segment,
    so segment leads get 1.  Inputs must stay >= ~1e-12 for a stable vjp;
    the renderer clamps (1 - alpha) accordingly.
    """
    xv = np.ascontiguousarray(x.value[:, 0])
    y = _k.excl_cumprod_fwd(xv, starts)

    def vjp(g):
        return (_k.excl_cumprod_bwd(xv, y, np.ascontiguousarray(g[:, 0]), starts)[:, None],)

    return tape._emit(y[:, None], (x,), vjp)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers, one pair per parameter."""

    def __init__(self, params: ParamStore):
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out["adam_m." + k] = self.m[k]
            out["adam_v." + k] = self.v[k]
        return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-15):
    """One bias-corrected Adam update (t counts from 1).

    Parameters are mutated in place so views held elsewhere (hash-grid
    table aliases) stay valid across steps.
    """
    if t < 1:
        raise ContractError("step index t must be >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, _ in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = params[name]
        if g.shape != arr.shape:
            raise ContractError(
                f"gradient shape mismatch for {name!r}: {g.shape} vs {arr.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
