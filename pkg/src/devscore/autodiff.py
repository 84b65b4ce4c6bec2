"""Reverse-mode differentiation over dense float64 arrays.

Covers what MLP scoring with scalar losses needs and little more: matrix
products, (broadcast) adds, ReLU, gather/mean reductions and a few scalar
transforms.  Graphs build implicitly as `Tensor` ops run; each node keeps a
closure that routes the output gradient to its parents.  `Tape` snapshots
the node order for the plain forward/backward API and is released after one
backward pass.

Conventions: everything is float64; ReLU and |x| use subgradient 0 at the
kink; max-with-index breaks ties toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    # collapse gradient over axes that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Graph node holding a float64 array, its gradient and a backward rule."""

    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = _f64(data)
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward = backward

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def _acc(self, g: Array) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data)

    # ---- binary ops -------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul expects 2-d operands, got "
                                 f"{self.data.shape} @ {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError(f"matmul inner sizes differ: {self.data.shape} @ {other.data.shape}")
        a, b = self, other
        out = Tensor(a.data @ b.data, (a, b))

        def back():
            a._acc(out.grad @ b.data.T)
            b._acc(a.data.T @ out.grad)
        out._backward = back
        return out

    def __add__(self, other) -> "Tensor":
        other = lift(other)
        a, b = self, other
        out = Tensor(a.data + b.data, (a, b))

        def back():
            a._acc(_unbroadcast(out.grad, a.data.shape))
            b._acc(_unbroadcast(out.grad, b.data.shape))
        out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = lift(other)
        a, b = self, other
        out = Tensor(a.data * b.data, (a, b))

        def back():
            a._acc(_unbroadcast(out.grad * b.data, a.data.shape))
            b._acc(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = lift(other)
        a, b = self, other
        out = Tensor(a.data / b.data, (a, b))

        def back():
            a._acc(_unbroadcast(out.grad / b.data, a.data.shape))
            b._acc(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))
        out._backward = back
        return out

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, (self,))

        def back():
            self._acc(-out.grad)
        out._backward = back
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-lift(other))

    def __rsub__(self, other) -> "Tensor":
        return lift(other) + (-self)

    def __pow__(self, c) -> "Tensor":
        c = float(c)
        out = Tensor(self.data ** c, (self,))

        def back():
            self._acc(out.grad * c * self.data ** (c - 1.0))
        out._backward = back
        return out

    # ---- elementwise unary ops ---------------------------------------------

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), (self,))

        def back():
            self._acc(out.grad * (self.data > 0.0))
        out._backward = back
        return out

    def abs(self) -> "Tensor":
        out = Tensor(np.abs(self.data), (self,))

        def back():
            self._acc(out.grad * np.sign(self.data))
        out._backward = back
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        p = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(p, (self,))

        def back():
            self._acc(out.grad * p * (1.0 - p))
        out._backward = back
        return out

    def log(self, floor: float = 1e-12) -> "Tensor":
        # log of the input clamped from below; zero gradient in the clamped region
        clipped = np.maximum(self.data, floor)
        out = Tensor(np.log(clipped), (self,))

        def back():
            self._acc(out.grad * np.where(self.data > floor, 1.0 / clipped, 0.0))
        out._backward = back
        return out

    # ---- shape and reduction ops --------------------------------------------

    def reshape(self, shape) -> "Tensor":
        out = Tensor(self.data.reshape(shape), (self,))

        def back():
            self._acc(out.grad.reshape(self.data.shape))
        out._backward = back
        return out

    def gather(self, indices) -> "Tensor":
        idx = np.asarray(indices, dtype=np.intp)
        out = Tensor(self.data[idx], (self,))

        def back():
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._acc(g)
        out._backward = back
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        if n == 0:
            raise ContractError("mean of an empty tensor")
        out = Tensor(self.data.mean(), (self,))

        def back():
            self._acc(np.full_like(self.data, float(out.grad) / n))
        out._backward = back
        return out


def lift(x) -> Tensor:
    """Wrap a plain number/array as a constant graph node."""
    return x if isinstance(x, Tensor) else Tensor(x)


def stack(tensors) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    ts = [lift(t) for t in tensors]
    if not ts:
        raise ContractError("stack of zero tensors")
    out = Tensor(np.stack([t.data for t in ts]), tuple(ts))

    def back():
        for i, t in enumerate(ts):
            t._acc(out.grad[i])
    out._backward = back
    return out


def vmax(t: Tensor) -> tuple[Tensor, int]:
    """Maximum element with its (flattened) index; ties pick the lowest index."""
    flat = t.data.ravel()
    if flat.size == 0:
        raise ContractError("max of an empty tensor")
    i = int(np.argmax(flat))
    out = Tensor(flat[i], (t,))

    def back():
        g = np.zeros_like(t.data)
        g.ravel()[i] = float(out.grad)
        t._acc(g)
    out._backward = back
    return out, i


def topo_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from `output`, parents strictly before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(output: Tensor) -> list[Tensor]:
    """Run reverse-mode accumulation from a scalar output; returns the node order."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.data.shape}")
    order = topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
    return order


# ---- plain layered forward/backward ------------------------------------------


@dataclass
class Layer:
    """One affine map with an optional ReLU."""
    w: Array
    b: Array
    relu: bool = False


@dataclass
class Tape:
    """Recorded graph for one forward pass: ordered nodes plus named leaves."""
    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)


def forward(layers, x) -> tuple[Tensor, Tape]:
    """Evaluate a layer stack on `x`, recording a tape.

    `layers` is a sequence of `Layer` (or `(w, b, relu)` triples); `x` is a
    single instance `(fan_in,)` or a batch `(n, fan_in)`.
    """
    lay = [l if isinstance(l, Layer) else Layer(*l) for l in layers]
    if not lay:
        raise ContractError("forward needs at least one layer")
    xa = _f64(x)
    if xa.ndim == 1:
        xa = xa[None, :]
    if xa.ndim != 2:
        raise DimensionError(f"input must be 1-d or 2-d, got shape {np.shape(x)}")
    leaf_x = Tensor(xa, name="input")
    leaves = {"input": leaf_x}
    h = leaf_x
    for i, l in enumerate(lay):
        w = Tensor(l.w, name=f"w{i}")
        b = Tensor(l.b, name=f"b{i}")
        if w.data.ndim != 2 or h.data.shape[1] != w.data.shape[0]:
            raise DimensionError(f"layer {i}: cannot multiply {h.data.shape} by {np.shape(l.w)}")
        leaves[w.name] = w
        leaves[b.name] = b
        h = h @ w + b
        if l.relu:
            h = h.relu()
    tape = Tape(output=h, nodes=topo_order(h), leaves=leaves)
    return h, tape


def backward(tape: Tape) -> dict[str, Array]:
    """Gradients of the tape's scalar output with respect to every named leaf.

    The tape's node list is cleared afterwards; a second call raises.
    """
    if not tape.nodes:
        raise ContractError("tape was already consumed by backward")
    backprop(tape.output)
    grads = {}
    for name, leaf in tape.leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    tape.nodes.clear()
    return grads


def grad_check(fn, point, step: float = 1e-5) -> float:
    """Worst-case relative gap between reverse-mode and central differences.

    `fn` maps a Tensor to a scalar Tensor.  Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    if step <= 0.0:
        raise ContractError(f"step must be positive, got {step}")
    x0 = _f64(point).copy()
    leaf = Tensor(x0.copy(), name="x")
    out = fn(leaf)
    if not isinstance(out, Tensor):
        raise ContractError("fn must return a Tensor")
    backprop(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(Tensor(x0.copy())).item()
        flat[i] = keep - step
        lo = fn(Tensor(x0.copy())).item()
        flat[i] = keep
        num_flat[i] = (hi - lo) / (2.0 * step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("non-finite gradient during grad_check")
    gap = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(gap.max()) if gap.size else 0.0
