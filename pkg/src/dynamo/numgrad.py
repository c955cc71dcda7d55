"""Dense float64 tensors and reverse-mode autodiff over fixed computation graphs.

Graphs are built once from a fixed primitive vocabulary (matmul, add/sub/mul,
elementwise nonlinearities, concat/slice, reductions, log-softmax) and then
bound with fresh leaf values on every forward call, so the same unrolled cell
can be reused across training steps.
"""
from __future__ import annotations

import numpy as np


class NumgradError(Exception):
    """Base error for graph construction and execution."""


class ShapeMismatch(NumgradError):
    pass


class UnboundLeaf(NumgradError):
    pass


class NonScalarOutput(NumgradError):
    pass


class BackwardBeforeForward(NumgradError):
    pass


class Tensor:
    """Row-major float64 array. Rejects NaN/Inf at construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor entries must be finite")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(sa, sb, node_label):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeMismatch(f"{node_label}: cannot broadcast {sa} with {sb}") from None


class Graph:
    """Static computation graph over named leaves.

    Nodes are appended in construction order, which is already a topological
    order; `backward` walks it once in reverse. Only leaves created with
    ``param=True`` appear in the gradient dict.
    """

    def __init__(self):
        self._kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._aux: list = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaf_id: dict[str, int] = {}
        self._leaf_of: dict[int, str] = {}
        self._param_names: list[str] = []
        self._marks: dict[str, int] = {}
        self._out: int | None = None
        self._values: list | None = None

    # -- construction ---------------------------------------------------

    def _push(self, kind, inputs, aux, shape) -> int:
        self._kinds.append(kind)
        self._inputs.append(inputs)
        self._aux.append(aux)
        self._shapes.append(tuple(int(s) for s in shape))
        return len(self._kinds) - 1

    def shape(self, node: int) -> tuple[int, ...]:
        return self._shapes[node]

    def leaf(self, name: str, shape, param: bool = True) -> int:
        if name in self._leaf_id:
            raise NumgradError(f"duplicate leaf {name!r}")
        nid = self._push("leaf", (), None, tuple(shape))
        self._leaf_id[name] = nid
        self._leaf_of[nid] = name
        if param:
            self._param_names.append(name)
        return nid

    def const(self, value) -> int:
        arr = _as_array(value)
        return self._push("const", (), arr, arr.shape)

    def add(self, a: int, b: int) -> int:
        shape = _broadcast_shape(self._shapes[a], self._shapes[b], "add")
        return self._push("add", (a, b), None, shape)

    def sub(self, a: int, b: int) -> int:
        shape = _broadcast_shape(self._shapes[a], self._shapes[b], "sub")
        return self._push("sub", (a, b), None, shape)

    def mul(self, a: int, b: int) -> int:
        shape = _broadcast_shape(self._shapes[a], self._shapes[b], "mul")
        return self._push("mul", (a, b), None, shape)

    def affine(self, a: int, scale: float, shift: float = 0.0) -> int:
        return self._push("affine", (a,), (float(scale), float(shift)), self._shapes[a])

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shapes[a], self._shapes[b]
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise ShapeMismatch(f"matmul: {sa} @ {sb}")
        return self._push("matmul", (a, b), None, (sa[0], sb[1]))

    def sigmoid(self, a: int) -> int:
        return self._push("sigmoid", (a,), None, self._shapes[a])

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,), None, self._shapes[a])

    def relu(self, a: int) -> int:
        return self._push("relu", (a,), None, self._shapes[a])

    def abs(self, a: int) -> int:
        return self._push("abs", (a,), None, self._shapes[a])

    def concat(self, a: int, b: int) -> int:
        sa, sb = self._shapes[a], self._shapes[b]
        if len(sa) != 2 or len(sb) != 2 or sa[0] != sb[0]:
            raise ShapeMismatch(f"concat: {sa} | {sb}")
        return self._push("concat", (a, b), sa[1], (sa[0], sa[1] + sb[1]))

    def slice_cols(self, a: int, lo: int, hi: int) -> int:
        sa = self._shapes[a]
        if len(sa) != 2 or not (0 <= lo <= hi <= sa[1]):
            raise ShapeMismatch(f"slice_cols [{lo}:{hi}] of {sa}")
        return self._push("slice_cols", (a,), (lo, hi), (sa[0], hi - lo))

    def reduce_sum(self, a: int, axis: int | None = None) -> int:
        return self._reduce("reduce_sum", a, axis)

    def reduce_mean(self, a: int, axis: int | None = None) -> int:
        return self._reduce("reduce_mean", a, axis)

    def _reduce(self, kind, a, axis):
        sa = self._shapes[a]
        if axis is None:
            shape = ()
        else:
            if axis < 0:
                axis += len(sa)
            if not 0 <= axis < len(sa):
                raise ShapeMismatch(f"{kind}: axis {axis} of {sa}")
            shape = sa[:axis] + sa[axis + 1 :]
        return self._push(kind, (a,), axis, shape)

    def log_softmax(self, a: int) -> int:
        sa = self._shapes[a]
        if len(sa) != 2:
            raise ShapeMismatch(f"log_softmax expects 2-D, got {sa}")
        return self._push("log_softmax", (a,), None, sa)

    # -- composites -------------------------------------------------------

    def squared_l2(self, a: int, axis: int | None = None) -> int:
        return self.reduce_sum(self.mul(a, a), axis)

    def l1(self, a: int, axis: int | None = None) -> int:
        return self.reduce_sum(self.abs(a), axis)

    def softmax_log_loss(self, logits: int, onehot: int) -> int:
        """Per-row cross entropy -sum(onehot * log_softmax(logits))."""
        ce = self.reduce_sum(self.mul(self.log_softmax(logits), onehot), axis=1)
        return self.affine(ce, -1.0)

    # -- execution --------------------------------------------------------

    def mark(self, name: str, node: int) -> int:
        self._marks[name] = node
        return node

    def output(self, node: int) -> None:
        self._out = node

    def forward(self, bindings: dict) -> Tensor:
        if self._out is None:
            raise NumgradError("graph has no output node")
        vals: list = [None] * len(self._kinds)
        for nid, kind in enumerate(self._kinds):
            ins = self._inputs[nid]
            aux = self._aux[nid]
            if kind == "leaf":
                name = self._leaf_of[nid]
                if name not in bindings:
                    raise UnboundLeaf(f"leaf {name!r} not bound")
                v = _as_array(bindings[name])
                if v.shape != self._shapes[nid]:
                    raise ShapeMismatch(
                        f"leaf {name!r}: bound {v.shape}, declared {self._shapes[nid]}"
                    )
                vals[nid] = v
            elif kind == "const":
                vals[nid] = aux
            elif kind == "add":
                vals[nid] = vals[ins[0]] + vals[ins[1]]
            elif kind == "sub":
                vals[nid] = vals[ins[0]] - vals[ins[1]]
            elif kind == "mul":
                vals[nid] = vals[ins[0]] * vals[ins[1]]
            elif kind == "affine":
                k, c = aux
                vals[nid] = vals[ins[0]] * k + c
            elif kind == "matmul":
                vals[nid] = vals[ins[0]] @ vals[ins[1]]
            elif kind == "sigmoid":
                x = vals[ins[0]]
                vals[nid] = 1.0 / (1.0 + np.exp(-x))
            elif kind == "tanh":
                vals[nid] = np.tanh(vals[ins[0]])
            elif kind == "relu":
                vals[nid] = np.maximum(vals[ins[0]], 0.0)
            elif kind == "abs":
                vals[nid] = np.abs(vals[ins[0]])
            elif kind == "concat":
                vals[nid] = np.concatenate((vals[ins[0]], vals[ins[1]]), axis=1)
            elif kind == "slice_cols":
                lo, hi = aux
                vals[nid] = vals[ins[0]][:, lo:hi]
            elif kind == "reduce_sum":
                vals[nid] = vals[ins[0]].sum(axis=aux)
            elif kind == "reduce_mean":
                vals[nid] = vals[ins[0]].mean(axis=aux)
            elif kind == "log_softmax":
                x = vals[ins[0]]
                m = x.max(axis=1, keepdims=True)
                z = x - m
                vals[nid] = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            else:  # pragma: no cover
                raise NumgradError(f"unknown op {kind}")
        self._values = vals
        return Tensor(np.asarray(vals[self._out]))

    def value(self, ref) -> np.ndarray:
        """Value of a node (or mark name) from the latest forward pass."""
        if self._values is None:
            raise BackwardBeforeForward("no forward pass has been run")
        nid = self._marks[ref] if isinstance(ref, str) else ref
        return self._values[nid]

    def backward(self, seed: float = 1.0) -> dict[str, Tensor]:
        if self._values is None:
            raise BackwardBeforeForward("backward called before forward")
        out = self._out
        if self._shapes[out] != ():
            raise NonScalarOutput(f"output shape {self._shapes[out]} is not scalar")
        vals = self._values
        grads: list = [None] * len(self._kinds)
        grads[out] = np.float64(seed)

        def acc(nid, g):
            if grads[nid] is None:
                grads[nid] = g
            else:
                grads[nid] = grads[nid] + g

        for nid in range(len(self._kinds) - 1, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            kind = self._kinds[nid]
            ins = self._inputs[nid]
            aux = self._aux[nid]
            if kind in ("leaf", "const"):
                continue
            if kind == "add":
                acc(ins[0], _unbroadcast(g, self._shapes[ins[0]]))
                acc(ins[1], _unbroadcast(g, self._shapes[ins[1]]))
            elif kind == "sub":
                acc(ins[0], _unbroadcast(g, self._shapes[ins[0]]))
                acc(ins[1], _unbroadcast(-g, self._shapes[ins[1]]))
            elif kind == "mul":
                acc(ins[0], _unbroadcast(g * vals[ins[1]], self._shapes[ins[0]]))
                acc(ins[1], _unbroadcast(g * vals[ins[0]], self._shapes[ins[1]]))
            elif kind == "affine":
                acc(ins[0], g * aux[0])
            elif kind == "matmul":
                acc(ins[0], g @ vals[ins[1]].T)
                acc(ins[1], vals[ins[0]].T @ g)
            elif kind == "sigmoid":
                y = vals[nid]
                acc(ins[0], g * y * (1.0 - y))
            elif kind == "tanh":
                y = vals[nid]
                acc(ins[0], g * (1.0 - y * y))
            elif kind == "relu":
                acc(ins[0], g * (vals[ins[0]] > 0.0))
            elif kind == "abs":
                acc(ins[0], g * np.sign(vals[ins[0]]))
            elif kind == "concat":
                acc(ins[0], g[:, :aux])
                acc(ins[1], g[:, aux:])
            elif kind == "slice_cols":
                lo, hi = aux
                full = np.zeros(self._shapes[ins[0]])
                full[:, lo:hi] = g
                acc(ins[0], full)
            elif kind == "reduce_sum":
                if aux is None:
                    acc(ins[0], np.broadcast_to(g, self._shapes[ins[0]]))
                else:
                    acc(ins[0], np.expand_dims(g, aux) * np.ones(self._shapes[ins[0]]))
            elif kind == "reduce_mean":
                src = self._shapes[ins[0]]
                if aux is None:
                    n = int(np.prod(src)) if src else 1
                    acc(ins[0], np.broadcast_to(g / n, src))
                else:
                    acc(ins[0], np.expand_dims(g, aux) * np.ones(src) / src[aux])
            elif kind == "log_softmax":
                y = vals[nid]
                sm = np.exp(y)
                acc(ins[0], g - sm * g.sum(axis=1, keepdims=True))
            else:  # pragma: no cover
                raise NumgradError(f"unknown op {kind}")

        out_grads = {}
        for name in self._param_names:
            nid = self._leaf_id[name]
            g = grads[nid]
            if g is None:
                g = np.zeros(self._shapes[nid])
            out_grads[name] = Tensor(np.broadcast_to(g, self._shapes[nid]).copy())
        return out_grads


def grad_check(graph: Graph, point: dict, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    The numeric side only ever calls `forward`, so it stays independent of the
    backward implementation it is checking.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: _as_array(v).copy() for k, v in point.items()}
    graph.forward(point)
    analytic = graph.backward()
    worst = 0.0
    for name in graph._param_names:
        base = point[name]
        an = analytic[name].data
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(graph.forward(point).data)
            flat[i] = orig - step
            lo = float(graph.forward(point).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        err = np.abs(an - num) / np.maximum(1.0, np.abs(an))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
