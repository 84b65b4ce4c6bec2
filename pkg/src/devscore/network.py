"""Anomaly scoring network: an MLP embedder topped by a single linear unit.

The embedder maps an instance to a representation (ReLU between hidden
layers, linear final layer); the scorer turns that representation into one
real anomaly score.  Plain-array helpers cover inference; `scores_tensor`
builds the differentiable path used by training and explanation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .bags import Bag
from .errors import ConfigError, DimensionError

Array = np.ndarray

DEFAULT_HIDDEN = (64, 32)


@dataclass
class NetworkParams:
    """All weights, keyed w0,b0,...,ws,bs in a fixed order.

    `arch` lists widths from input to representation, e.g. (8, 64, 32);
    the scorer weight `ws` has the final width, `bs` is its bias.
    """
    arch: tuple[int, ...]
    arrays: dict[str, Array]

    @property
    def theta_t(self) -> list[tuple[Array, Array]]:
        return [(self.arrays[f"w{i}"], self.arrays[f"b{i}"])
                for i in range(len(self.arch) - 1)]

    @property
    def theta_s(self) -> tuple[Array, float]:
        return self.arrays["ws"], float(self.arrays["bs"])

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def allclose(self, other: "NetworkParams", tol: float = 0.0) -> bool:
        return (self.arch == other.arch
                and all(np.allclose(self.arrays[k], other.arrays[k], rtol=0, atol=tol)
                        for k in self.arrays))


def init_params(arch, seed: int) -> NetworkParams:
    """Fresh parameters: weights uniform in +-sqrt(6/fan_in), biases zero."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or any(a < 1 for a in arch):
        raise ConfigError(f"arch needs at least two widths >= 1, got {arch}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, Array] = {}
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    bound = np.sqrt(6.0 / arch[-1])
    arrays["ws"] = rng.uniform(-bound, bound, size=arch[-1])
    arrays["bs"] = np.zeros(())
    return NetworkParams(arch, arrays)


def embed(x, theta_t) -> Array:
    """Representation of one instance; ReLU after every layer but the last."""
    h = np.asarray(x, dtype=np.float64)
    last = len(theta_t) - 1
    for i, (w, b) in enumerate(theta_t):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(f"layer {i}: input width {h.shape[-1]} != {w.shape[0]}")
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def score_instance(q, theta_s) -> float:
    """Single linear unit on a representation."""
    w, b = theta_s
    q = np.asarray(q, dtype=np.float64)
    if q.shape != w.shape:
        raise DimensionError(f"representation shape {q.shape} != scorer shape {w.shape}")
    return float(q @ w + b)


def score_bag_instances(bag: Bag, params: NetworkParams) -> Array:
    """Per-instance scores for a bag, as embed followed by the scorer."""
    if bag.dim != params.arch[0]:
        raise DimensionError(f"bag {bag.id!r} dimension {bag.dim} != network input {params.arch[0]}")
    theta_t, theta_s = params.theta_t, params.theta_s
    return np.array([score_instance(embed(x, theta_t), theta_s) for x in bag.instances])


def score_matrix(params: NetworkParams, x: Array) -> Array:
    """Scores for a whole (n, d) matrix of instances in one shot."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch[0]:
        raise DimensionError(f"expected (n, {params.arch[0]}) instances, got {x.shape}")
    h = embed(x, params.theta_t)
    w, b = params.theta_s
    return h @ w + b


def make_leaves(params: NetworkParams) -> dict[str, Tensor]:
    """Named leaf tensors over the current parameter arrays."""
    return {name: Tensor(arr, name=name) for name, arr in params.arrays.items()}


def scores_tensor(leaves: dict[str, Tensor], arch, x: Tensor) -> Tensor:
    """Differentiable instance scores, shape (n,), from leaf tensors."""
    h = x
    n_layers = len(arch) - 1
    for i in range(n_layers):
        h = h @ leaves[f"w{i}"] + leaves[f"b{i}"]
        if i < n_layers - 1:
            h = h.relu()
    s = h @ leaves["ws"].reshape((arch[-1], 1)) + leaves["bs"]
    return s.reshape((x.data.shape[0],))
