"""Minimal reverse-mode gradient engine over dense float64 tensors.

Supports exactly the primitives needed by the bias-free homogeneous
architectures in this package: dense matmul, ReLU, LeakyReLU, and the
square activation. Tapes are rebuilt on every forward call and are
single-use; no graph caching, no Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible dimensions."""

    def __init__(self, op: str, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"op {op!r}: expected {expected}, got {got}")


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces non-finite values."""


@dataclass
class Tensor:
    """Dense tensor: a shape plus a contiguous flat float64 buffer."""

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if int(np.prod(self.shape)) != self.data.size:
            raise ShapeError("tensor", self.shape, self.data.size)

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape, arr.ravel())

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def as_array(x) -> np.ndarray:
    """Coerce a Tensor or array-like to a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.array()
    return np.asarray(x, dtype=np.float64)


def subgradient_convention(primitive: str, z, alpha: float = 0.0):
    """Fixed derivative selection for kinked primitives.

    ReLU uses derivative 0 at z == 0; LeakyReLU uses the negative-side
    slope alpha at z == 0. This is the single source of truth used by
    the backward rules, so runs are reproducible at kinks.
    """
    z = np.asarray(z, dtype=np.float64)
    if primitive == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if primitive == "leaky_relu":
        return np.where(z > 0.0, 1.0, alpha)
    raise ValueError(f"no subgradient convention for primitive {primitive!r}")


@dataclass
class Node:
    """One primitive op: its value, parent indices, and a local VJP.

    vjp(adjoint, grad) returns the adjoint for each parent node and may
    accumulate parameter gradients directly into the flat `grad` buffer.
    """

    op: str
    value: np.ndarray
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray, np.ndarray], tuple] | None


@dataclass
class Tape:
    """Topologically ordered record of one forward pass."""

    param_count: int
    nodes: list[Node] = field(default_factory=list)

    def add(self, op: str, value: np.ndarray, parents: tuple[int, ...], vjp) -> int:
        self.nodes.append(Node(op, value, parents, vjp))
        return len(self.nodes) - 1

    @property
    def output(self) -> np.ndarray:
        return self.nodes[-1].value


def _dense(tape: Tape, h_idx: int, weights: np.ndarray, offset: int) -> int:
    h = tape.nodes[h_idx].value
    if h.shape[1] != weights.shape[0]:
        raise ShapeError("dense", f"inner dim {weights.shape[0]}", h.shape)
    value = h @ weights
    size = weights.size

    def vjp(adj, grad):
        grad[offset : offset + size] += (h.T @ adj).ravel()
        return (adj @ weights.T,)

    return tape.add("dense", value, (h_idx,), vjp)


def _activation(tape: Tape, h_idx: int, kind: str, alpha: float) -> int:
    z = tape.nodes[h_idx].value
    if kind == "relu":
        value = np.maximum(z, 0.0)
    elif kind == "leaky_relu":
        value = np.where(z > 0.0, z, alpha * z)
    elif kind == "square":
        value = z * z
    else:
        raise ValueError(f"unknown activation {kind!r}")

    def vjp(adj, grad):
        if kind == "square":
            return (2.0 * z * adj,)
        return (subgradient_convention(kind, z, alpha) * adj,)

    return tape.add(kind, value, (h_idx,), vjp)


def forward(graph: Sequence, params: np.ndarray, x) -> tuple[np.ndarray, Tape]:
    """Run the layer graph on input x, recording a tape.

    x may be a single sample (d,) or a batch (B, d); the output is
    (B, C) for C model outputs, squeezed to (B,) when C == 1 and to a
    scalar for a single sample of a single-output model.
    """
    params = np.asarray(params, dtype=np.float64)
    X = as_array(x)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    tape = Tape(param_count=params.size)
    idx = tape.add("input", X, (), None)
    for layer in graph:
        if layer.kind == "dense":
            if tape.nodes[idx].value.shape[1] != layer.in_dim:
                raise ShapeError(
                    "dense", f"input dim {layer.in_dim}", tape.nodes[idx].value.shape
                )
            w = params[layer.offset : layer.offset + layer.in_dim * layer.out_dim]
            w = w.reshape(layer.in_dim, layer.out_dim)
            idx = _dense(tape, idx, w, layer.offset)
        else:
            idx = _activation(tape, idx, layer.kind, layer.alpha)
    out = tape.nodes[idx].value
    if out.shape[1] == 1:
        def vjp(adj, grad):
            return (adj[:, None],)

        idx = tape.add("squeeze", out[:, 0], (idx,), vjp)
        out = tape.nodes[idx].value
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("forward pass produced non-finite output")
    if single:
        out = out[0]
    return out, tape


def backward(tape: Tape, seed=1.0) -> np.ndarray:
    """Reverse accumulation: returns seed^T J as a flat parameter gradient.

    seed is a scalar or an array matching the registered output shape;
    per-sample and per-class weights enter here, so one batched backward
    yields any weighted combination of per-sample gradients.
    """
    nodes = tape.nodes
    out_value = nodes[-1].value
    adjoints: list[np.ndarray | None] = [None] * len(nodes)
    adjoints[-1] = np.broadcast_to(
        np.asarray(seed, dtype=np.float64), out_value.shape
    ).astype(np.float64)
    grad = np.zeros(tape.param_count)
    for i in range(len(nodes) - 1, -1, -1):
        adj = adjoints[i]
        if adj is None or nodes[i].vjp is None:
            continue
        contributions = nodes[i].vjp(adj, grad)
        for parent, contrib in zip(nodes[i].parents, contributions):
            if adjoints[parent] is None:
                adjoints[parent] = np.array(contrib, dtype=np.float64)
            else:
                adjoints[parent] += contrib
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("backward pass produced non-finite gradient")
    return grad
