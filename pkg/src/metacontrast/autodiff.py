"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: each forward call builds a fresh graph of ``Node`` objects,
every node carrying its value, its parents, and a closure that routes the
output gradient back to those parents. ``backward`` walks the graph once
in reverse topological order; a parameter used in several places receives
the sum of all contributions.

Everything is float64 and reductions follow numpy's fixed axis order, so
repeated runs on one platform are bit-identical.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "ParamSet",
    "as_node",
    "add",
    "sub",
    "mul",
    "matmul",
    "absolute",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "stack",
    "l2_normalize",
    "logsumexp",
    "backward",
    "numeric_grad",
    "sgd_step",
]

# Rows whose norm falls below this are treated as degenerate by
# l2_normalize and mapped to a fixed unit vector (see the op docstring).
_NORM_FLOOR = 1e-12


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    Leaves (parameters, inputs, constants) have no parents. Operation
    nodes are created by the catalog functions below, which attach the
    local gradient rule as a closure over the operands.
    """

    __slots__ = ("values", "parents", "op", "grad", "_backward")

    def __init__(self, values, parents: tuple = (), op: str = "leaf",
                 backward_fn: Callable[[], None] | None = None):
        self.values = _as_array(values)
        self.parents = parents
        self.op = op
        self.grad: np.ndarray | None = None
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item: node has shape {self.shape}, not a scalar")
        return float(self.values.reshape(()))

    def detached(self) -> "Node":
        """A leaf copy of this node's value, cut off from the graph."""
        return Node(self.values.copy())

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"


def as_node(x) -> Node:
    """Lift a number or array to a constant leaf; pass Nodes through."""
    if isinstance(x, Node):
        return x
    return Node(x)


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ValueError(
            f"{op}: incompatible shapes {a.values.shape} and {b.values.shape}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# operation catalog


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    out = Node(a.values + b.values, (a, b), "add")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.values.shape)
        b.grad += _unbroadcast(out.grad, b.values.shape)

    out._backward = _bw
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    out = Node(a.values - b.values, (a, b), "sub")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.values.shape)
        b.grad -= _unbroadcast(out.grad, b.values.shape)

    out._backward = _bw
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    out = Node(a.values * b.values, (a, b), "mul")

    def _bw():
        a.grad += _unbroadcast(out.grad * b.values, a.values.shape)
        b.grad += _unbroadcast(out.grad * a.values, b.values.shape)

    out._backward = _bw
    return out


def matmul(a, b) -> Node:
    """Matrix product: (m, n) @ (n, p) -> (m, p) or (m, n) @ (n,) -> (m,)."""
    a, b = as_node(a), as_node(b)
    va, vb = a.values, b.values
    ok = va.ndim == 2 and vb.ndim in (1, 2) and va.shape[1] == vb.shape[0]
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {va.shape} and {vb.shape}")
    out = Node(va @ vb, (a, b), "matmul")

    def _bw():
        g = out.grad
        if vb.ndim == 1:
            a.grad += np.outer(g, vb)
            b.grad += va.T @ g
        else:
            a.grad += g @ vb.T
            b.grad += va.T @ g

    out._backward = _bw
    return out


def absolute(a) -> Node:
    a = as_node(a)
    out = Node(np.abs(a.values), (a,), "abs")

    def _bw():
        # subgradient 0 at exactly zero
        a.grad += out.grad * np.sign(a.values)

    out._backward = _bw
    return out


def relu(a) -> Node:
    a = as_node(a)
    out = Node(np.maximum(a.values, 0.0), (a,), "relu")

    def _bw():
        a.grad += out.grad * (a.values > 0.0)

    out._backward = _bw
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    v = a.values
    # exp(-|v|) never overflows; both branches of the where are safe
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Node(s, (a,), "sigmoid")

    def _bw():
        a.grad += out.grad * out.values * (1.0 - out.values)

    out._backward = _bw
    return out


def exp(a) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.values), (a,), "exp")

    def _bw():
        a.grad += out.grad * out.values

    out._backward = _bw
    return out


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.values <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = Node(np.log(a.values), (a,), "log")

    def _bw():
        a.grad += out.grad / a.values

    out._backward = _bw
    return out


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    if not lo < hi:
        raise ValueError(f"clip: lo must be < hi, got {lo} and {hi}")
    a = as_node(a)
    v = a.values
    out = Node(np.clip(v, lo, hi), (a,), "clip")
    mask = (v >= lo) & (v <= hi)

    def _bw():
        a.grad += out.grad * mask

    out._backward = _bw
    return out


def reduce_sum(a, axis: int | None = None) -> Node:
    a = as_node(a)
    if axis is not None and not -a.values.ndim <= axis < a.values.ndim:
        raise ValueError(f"reduce_sum: axis {axis} out of range for shape {a.shape}")
    out = Node(np.sum(a.values, axis=axis), (a,), "reduce_sum")

    def _bw():
        if axis is None:
            a.grad += out.grad
        else:
            a.grad += np.expand_dims(out.grad, axis)

    out._backward = _bw
    return out


def reduce_mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    if axis is not None and not -a.values.ndim <= axis < a.values.ndim:
        raise ValueError(f"reduce_mean: axis {axis} out of range for shape {a.shape}")
    count = a.values.size if axis is None else a.values.shape[axis]
    out = Node(np.mean(a.values, axis=axis), (a,), "reduce_mean")

    def _bw():
        if axis is None:
            a.grad += out.grad / count
        else:
            a.grad += np.expand_dims(out.grad, axis) / count

    out._backward = _bw
    return out


def concat(nodes: Sequence, axis: int = -1) -> Node:
    """Concatenate nodes along an existing axis."""
    parts = [as_node(n) for n in nodes]
    if not parts:
        raise ValueError("concat: need at least one node")
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        shapes = [p.values.shape for p in parts]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    out = Node(values, tuple(parts), "concat")
    ax = axis if axis >= 0 else values.ndim + axis
    sizes = [p.values.shape[ax] for p in parts]

    def _bw():
        offset = 0
        index = [slice(None)] * values.ndim
        for p, size in zip(parts, sizes):
            index[ax] = slice(offset, offset + size)
            p.grad += out.grad[tuple(index)]
            offset += size

    out._backward = _bw
    return out


def stack(nodes: Sequence) -> Node:
    """Stack equal-shape nodes along a new leading axis."""
    parts = [as_node(n) for n in nodes]
    if not parts:
        raise ValueError("stack: need at least one node")
    shapes = {p.values.shape for p in parts}
    if len(shapes) > 1:
        raise ValueError(f"stack: mismatched shapes {sorted(shapes)}")
    out = Node(np.stack([p.values for p in parts]), tuple(parts), "stack")

    def _bw():
        for i, p in enumerate(parts):
            p.grad += out.grad[i]

    out._backward = _bw
    return out


def l2_normalize(a, axis: int = -1) -> Node:
    """Scale slices along ``axis`` to unit Euclidean norm.

    A slice whose norm is below 1e-12 has no meaningful direction; it is
    mapped to the first basis vector (a fixed unit output, locally
    constant, zero gradient) so that downstream cosine arithmetic stays
    defined for degenerate inputs such as a zero-initialised encoder.
    """
    a = as_node(a)
    v = a.values
    if v.ndim == 0:
        raise ValueError("l2_normalize: input must have at least one axis")
    vm = np.moveaxis(v, axis, -1)
    norm = np.sqrt(np.sum(vm * vm, axis=-1, keepdims=True))
    degenerate = norm < _NORM_FLOOR
    safe = np.where(degenerate, 1.0, norm)
    ym = vm / safe
    if degenerate.any():
        ym = np.where(degenerate, 0.0, ym)
        ym[..., 0] = np.where(degenerate[..., 0], 1.0, ym[..., 0])
    out = Node(np.moveaxis(ym, -1, axis), (a,), "l2_normalize")

    def _bw():
        gm = np.moveaxis(out.grad, axis, -1)
        along = np.sum(gm * ym, axis=-1, keepdims=True)
        gam = (gm - ym * along) / safe
        if degenerate.any():
            gam = np.where(degenerate, 0.0, gam)
        a.grad += np.moveaxis(gam, -1, axis)

    out._backward = _bw
    return out


def logsumexp(a, axis: int = 0) -> Node:
    """log(sum(exp(a))) along ``axis``, computed with max subtraction."""
    a = as_node(a)
    v = a.values
    if v.ndim == 0:
        raise ValueError("logsumexp: input must have at least one axis")
    if not -v.ndim <= axis < v.ndim:
        raise ValueError(f"logsumexp: axis {axis} out of range for shape {v.shape}")
    m = np.max(v, axis=axis, keepdims=True)
    total = np.sum(np.exp(v - m), axis=axis, keepdims=True)
    kept = np.log(total) + m
    softmax = np.exp(v - kept)
    out = Node(np.squeeze(kept, axis=axis), (a,), "logsumexp")

    def _bw():
        a.grad += softmax * np.expand_dims(out.grad, axis)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# graph traversal and the training-facing API


def _topo_order(root: Node) -> list[Node]:
    """Parents-before-children order ending at ``root`` (iterative DFS)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Node) -> None:
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.values)
    root.grad = np.ones_like(root.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


class ParamSet:
    """Named trainable arrays wrapped as graph leaves.

    The name set is fixed at construction; an "update" builds a new
    ParamSet with the same names (see ``sgd_step``). Construction always
    copies, so two ParamSets never share storage or graph nodes.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        if not arrays:
            raise ValueError("ParamSet: need at least one entry")
        self._entries: dict[str, Node] = {
            str(name): Node(_as_array(value).copy()) for name, value in arrays.items()
        }
        # optional record of how this set was produced (seed, inner-step
        # inputs); carried so an exact meta-gradient check can replay the
        # update that created it
        self.provenance: dict | None = None

    @classmethod
    def merged(cls, *maps) -> "ParamSet":
        combined: dict[str, np.ndarray] = {}
        for m in maps:
            items = m.to_arrays().items() if isinstance(m, ParamSet) else m.items()
            for name, value in items:
                if name in combined:
                    raise ValueError(f"ParamSet.merged: duplicate name {name!r}")
                combined[name] = value
        return cls(combined)

    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def items(self):
        return self._entries.items()

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Node:
        if name not in self._entries:
            raise KeyError(f"ParamSet: no entry named {name!r}")
        return self._entries[name]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: node.values.copy() for name, node in self._entries.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self.to_arrays())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: node.values.shape for name, node in self._entries.items()}

    @property
    def n_params(self) -> int:
        return sum(node.values.size for node in self._entries.values())

    def __repr__(self) -> str:
        return f"ParamSet({self.n_params} params in {len(self)} entries)"


def backward(loss: Node, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every entry of ``params``.

    Entries not reachable from ``loss`` get zero gradients, so one
    parameter set can serve objectives that touch different subsets.
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    for _, node in params.items():
        node.grad = None
    _run_backward(loss)
    grads: dict[str, np.ndarray] = {}
    for name, node in params.items():
        grads[name] = np.zeros_like(node.values) if node.grad is None else node.grad.copy()
    return grads


def numeric_grad(f: Callable[[ParamSet], float], params: ParamSet,
                 eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    ``f`` is called with a fresh ParamSet per evaluation and must return a
    finite scalar; one entry is perturbed by +/- eps at a time.
    """
    if eps <= 0.0:
        raise ValueError(f"numeric_grad: eps must be positive, got {eps}")
    base = {name: node.values.copy() for name, node in params.items()}

    def evaluate(which: str) -> float:
        result = f(ParamSet(base))
        if isinstance(result, Node):
            result = result.item()
        result = float(result)
        if not np.isfinite(result):
            raise ValueError(f"numeric_grad: non-finite value while perturbing {which!r}")
        return result

    grads: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = evaluate(name)
            flat[i] = original - eps
            f_minus = evaluate(name)
            flat[i] = original
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = grad
    return grads


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """One gradient-descent step; returns a new ParamSet, inputs untouched."""
    if lr < 0.0:
        raise ValueError(f"sgd_step: lr must be non-negative, got {lr}")
    updated: dict[str, np.ndarray] = {}
    for name, node in params.items():
        if name not in grads:
            raise ValueError(f"sgd_step: missing gradient for {name!r}")
        g = _as_array(grads[name])
        if g.shape != node.values.shape:
            raise ValueError(
                f"sgd_step: gradient shape {g.shape} does not match "
                f"parameter {name!r} shape {node.values.shape}"
            )
        updated[name] = node.values - lr * g
    return ParamSet(updated)
