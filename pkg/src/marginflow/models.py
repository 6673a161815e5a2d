"""Homogeneous architectures with declared homogeneity structure.

Every built-in model is bias-free, so the network output scales as
Phi(c * theta; x) = c^L Phi(theta; x). Each dense layer forms a block
with its own multi-homogeneity exponent k_i, and sum(k_i) == L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tape, backward, forward


@dataclass(frozen=True)
class Layer:
    kind: str  # "dense" | "relu" | "leaky_relu" | "square"
    in_dim: int = 0
    out_dim: int = 0
    offset: int = 0  # start of the weight slice in the flat parameter vector
    alpha: float = 0.0  # LeakyReLU negative-side slope


@dataclass(frozen=True)
class Block:
    """A parameter slice with its multi-homogeneity exponent k_i."""

    name: str
    start: int
    stop: int
    k: float


class ParamVector:
    """Flat float64 parameter vector with a cached Euclidean norm."""

    __slots__ = ("data", "_rho")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._rho = None

    @property
    def rho(self) -> float:
        if self._rho is None:
            self._rho = float(np.linalg.norm(self.data))
        return self._rho

    def unit(self) -> np.ndarray:
        return self.data / self.rho

    def block_norm(self, block: Block) -> float:
        return float(np.linalg.norm(self.data[block.start : block.stop]))

    def __len__(self) -> int:
        return self.data.size


def as_params(theta) -> ParamVector:
    if isinstance(theta, ParamVector):
        return theta
    return ParamVector(theta)


@dataclass(frozen=True)
class HomogeneousModel:
    """Architecture description consumed by the autodiff engine."""

    name: str
    graph: tuple[Layer, ...]
    order_L: float
    blocks: tuple[Block, ...]
    input_dim: int
    num_outputs: int
    param_count: int

    def __post_init__(self):
        total = sum(b.k for b in self.blocks)
        if abs(total - self.order_L) > 1e-12:
            raise ValueError(
                f"block exponents sum to {total}, expected order {self.order_L}"
            )

    def forward(self, theta, x) -> tuple[np.ndarray, Tape]:
        return forward(self.graph, as_params(theta).data, x)

    def output(self, theta, x) -> np.ndarray:
        out, _ = self.forward(theta, x)
        return out


def _dense_chain(name: str, dims: list[int], activation: str | None,
                 alpha: float = 0.0, block_ks=None) -> HomogeneousModel:
    layers = []
    blocks = []
    offset = 0
    n_dense = len(dims) - 1
    for i in range(n_dense):
        layers.append(Layer("dense", dims[i], dims[i + 1], offset))
        size = dims[i] * dims[i + 1]
        k = 1.0 if block_ks is None else block_ks[i]
        blocks.append(Block(f"dense{i}", offset, offset + size, k))
        offset += size
        if activation is not None and i < n_dense - 1:
            layers.append(Layer(activation, alpha=alpha))
    order = sum(b.k for b in blocks)
    return HomogeneousModel(
        name=name,
        graph=tuple(layers),
        order_L=order,
        blocks=tuple(blocks),
        input_dim=dims[0],
        num_outputs=dims[-1],
        param_count=offset,
    )


def linear(input_dim: int, num_outputs: int = 1) -> HomogeneousModel:
    return _dense_chain("linear", [input_dim, num_outputs], None)


def deep_linear(input_dim: int, widths: list[int], num_outputs: int = 1) -> HomogeneousModel:
    return _dense_chain("deep_linear", [input_dim, *widths, num_outputs], None)


def relu_mlp(input_dim: int, widths: list[int], num_outputs: int = 1) -> HomogeneousModel:
    return _dense_chain("relu_mlp", [input_dim, *widths, num_outputs], "relu")


def leaky_relu_mlp(input_dim: int, widths: list[int], alpha: float = 0.1,
                   num_outputs: int = 1) -> HomogeneousModel:
    return _dense_chain(
        "leaky_relu_mlp", [input_dim, *widths, num_outputs], "leaky_relu", alpha=alpha
    )


def quadratic_mlp(input_dim: int, widths: list[int], num_outputs: int = 1) -> HomogeneousModel:
    """MLP with square activations; layer i has exponent k_i = 2^(D-i).

    With D dense layers the order is L = 2^D - 1: each square activation
    doubles the degree of everything below it.
    """
    dims = [input_dim, *widths, num_outputs]
    n_dense = len(dims) - 1
    block_ks = [float(2 ** (n_dense - 1 - i)) for i in range(n_dense)]
    return _dense_chain("quadratic_mlp", dims, "square", block_ks=block_ks)


_FAMILIES = {
    "linear": linear,
    "deep_linear": deep_linear,
    "relu_mlp": relu_mlp,
    "leaky_relu_mlp": leaky_relu_mlp,
    "quadratic_mlp": quadratic_mlp,
}


def build_model(family: str, input_dim: int, widths=None, alpha: float = 0.1,
                num_outputs: int = 1) -> HomogeneousModel:
    """Build a model from run-config fields."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    if family == "linear":
        return linear(input_dim, num_outputs)
    if family == "leaky_relu_mlp":
        return leaky_relu_mlp(input_dim, list(widths), alpha, num_outputs)
    return _FAMILIES[family](input_dim, list(widths), num_outputs)


def init_params(model: HomogeneousModel, rng: np.random.Generator,
                scale: float = 1.0) -> ParamVector:
    """Seeded Gaussian init, per-layer 1/sqrt(fan_in) scaling."""
    data = np.empty(model.param_count)
    for layer in model.graph:
        if layer.kind != "dense":
            continue
        size = layer.in_dim * layer.out_dim
        data[layer.offset : layer.offset + size] = rng.standard_normal(size) / np.sqrt(
            layer.in_dim
        )
    return ParamVector(scale * data)


def homogeneity_check(model: HomogeneousModel, theta, x, alpha: float) -> float:
    """Residual of Phi(alpha*theta; x) == alpha^L * Phi(theta; x).

    alpha in [0.5, 2] is recommended to keep alpha^L well away from
    overflow for deep quadratic nets.
    """
    theta = as_params(theta)
    base = np.atleast_1d(model.output(theta, x))
    scaled = np.atleast_1d(model.output(alpha * theta.data, x))
    resid = np.abs(scaled - alpha**model.order_L * base) / (1.0 + np.abs(base))
    return float(np.max(resid))


def euler_residual(model: HomogeneousModel, theta, x) -> float:
    """Residual of the Euler identity <theta, grad Phi> == L * Phi."""
    theta = as_params(theta)
    out, tape = model.forward(theta, x)
    out = np.atleast_1d(out)
    worst = 0.0
    for j in range(out.size):
        seed = np.zeros(out.size)
        seed[j] = 1.0
        grad = backward(tape, seed if out.size > 1 else 1.0)
        resid = abs(float(theta.data @ grad) - model.order_L * out[j]) / (
            1.0 + abs(out[j])
        )
        worst = max(worst, resid)
        if out.size == 1:
            break
    return worst


def block_euler_residual(model: HomogeneousModel, theta, x, block_i: int) -> float:
    """Residual of the per-block identity <w_i, grad_{w_i} Phi> == k_i * Phi."""
    if not 0 <= block_i < len(model.blocks):
        raise IndexError(f"block index {block_i} out of range")
    theta = as_params(theta)
    block = model.blocks[block_i]
    out, tape = model.forward(theta, x)
    out = np.atleast_1d(out)
    worst = 0.0
    for j in range(out.size):
        seed = np.zeros(out.size)
        seed[j] = 1.0
        grad = backward(tape, seed if out.size > 1 else 1.0)
        inner = float(theta.data[block.start : block.stop] @ grad[block.start : block.stop])
        resid = abs(inner - block.k * out[j]) / (1.0 + abs(out[j]))
        worst = max(worst, resid)
        if out.size == 1:
            break
    return worst


def preactivations(model: HomogeneousModel, theta, x) -> list[np.ndarray]:
    """Values entering each nonlinearity; used to avoid kink probes."""
    _, tape = model.forward(theta, x)
    pres = []
    for i, node in enumerate(tape.nodes):
        if node.op in ("relu", "leaky_relu"):
            pres.append(tape.nodes[i - 1].value)
    return pres


def sample_smooth_probe(model: HomogeneousModel, theta, rng: np.random.Generator,
                        kink_tol: float = 1e-8, max_tries: int = 100) -> np.ndarray:
    """Draw an input with every pre-activation magnitude above kink_tol.

    The Euler identity only holds a.e.; re-sampling keeps validator
    probes away from measure-zero kinks.
    """
    for _ in range(max_tries):
        x = rng.standard_normal(model.input_dim)
        pres = preactivations(model, theta, x)
        if all(np.min(np.abs(p)) > kink_tol for p in pres) or not pres:
            return x
    raise RuntimeError("could not find a smooth probe point")


def per_sample_grads(model: HomogeneousModel, theta, X) -> np.ndarray:
    """Per-sample gradients of the scalar output, one backward per row.

    Desk-scale helper (N <= a few dozen) for SVM features and KKT
    certificates; the training path never materializes this matrix.
    """
    theta = as_params(theta)
    X = autodiff.as_array(X)
    if X.ndim == 1:
        X = X[None, :]
    if model.num_outputs != 1:
        raise ValueError("per_sample_grads expects a single-output model")
    grads = np.empty((X.shape[0], model.param_count))
    for n in range(X.shape[0]):
        _, tape = model.forward(theta, X[n])
        grads[n] = backward(tape, 1.0)
    return grads


def per_sample_grad_norms(model: HomogeneousModel, theta, X) -> np.ndarray:
    """Norms ||grad_theta Phi(theta; x_n)|| for a whole batch at once.

    Uses the layer structure directly: for a dense layer the per-sample
    weight gradient is an outer product, so its Frobenius norm factors
    into activation norm times sensitivity norm.
    """
    theta = as_params(theta)
    X = autodiff.as_array(X)
    if X.ndim == 1:
        X = X[None, :]
    if model.num_outputs != 1:
        raise ValueError("per_sample_grad_norms expects a single-output model")
    # forward: record (weight matrix, layer input, pre-activation, act after)
    records = []
    h = X
    pending = None
    for layer in model.graph:
        if layer.kind == "dense":
            w = theta.data[
                layer.offset : layer.offset + layer.in_dim * layer.out_dim
            ].reshape(layer.in_dim, layer.out_dim)
            z = h @ w
            pending = [w, h, z, None]
            records.append(pending)
            h = z
        else:
            pending[3] = layer
            if layer.kind == "square":
                h = h * h
            else:
                h = np.where(h > 0.0, h, layer.alpha * h)
    # backward: delta_i = dPhi/dz_i; weight grad for layer i is outer(h_in, delta)
    delta = np.ones((X.shape[0], 1))
    sq_norms = np.zeros(X.shape[0])
    for w, h_in, z, act in reversed(records):
        if act is not None:
            if act.kind == "square":
                delta = delta * (2.0 * z)
            else:
                delta = delta * autodiff.subgradient_convention(act.kind, z, act.alpha)
        sq_norms += np.einsum("bi,bi->b", h_in, h_in) * np.einsum(
            "bo,bo->b", delta, delta
        )
        delta = delta @ w.T
    return np.sqrt(sq_norms)
