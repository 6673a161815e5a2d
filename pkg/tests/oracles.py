"""Independent oracles shared by the test suite.

These deliberately avoid the package's tape machinery: gradients come
from central finite differences and forward values from a straight-line
numpy evaluation, so agreement is evidence rather than tautology.
"""

import numpy as np


def fd_grad(fun, theta, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        g[i] = (fun(theta + e) - fun(theta - e)) / (2.0 * h)
    return g


def plain_forward(graph, theta, x):
    """Loop-free-of-tape forward pass over a layer list."""
    theta = np.asarray(theta, dtype=np.float64)
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for layer in graph:
        if layer.kind == "dense":
            w = theta[layer.offset : layer.offset + layer.in_dim * layer.out_dim]
            h = h @ w.reshape(layer.in_dim, layer.out_dim)
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "leaky_relu":
            h = np.where(h > 0.0, h, layer.alpha * h)
        elif layer.kind == "square":
            h = h * h
        else:
            raise ValueError(layer.kind)
    return h


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


# Discount curve T(U) for the logistic loss at (order, anchor, point),
# integrated with mpmath at 40 digits straight from the definition,
# with no package code involved:
#   lam(u) = gp(u)/g(u),  g(u) = -log(expm1(e^-u)),
#   gp(u) = e^-u e^(e^-u) / expm1(e^-u)
#   F(u) = e^u lam(u) (1 + 2 (1 + lam(u)/L) u0/(2u))
#   M = running max of F from u0 (recovery point via mp.findroot)
#   T(U) = mp.quad of lam(u) - e^-u M(u) over [U, inf)
LOGISTIC_PHI_CORRECTION = [
    (2.0, 0.6, 0.6, -14.063068153714179),
    (2.0, 0.6, 2.3, -2.2113625600657136),
    (2.0, 0.6, 10.0, -0.06150013719180316),
    (2.0, 0.6, 60.0, -0.010041666666666666),
    (2.0, 3.0, 3.0, -1.0921578689527558),
    (2.0, 3.0, 4.7, -0.6728843505329334),
    (2.0, 3.0, 10.0, -0.3075006859590158),
    (2.0, 3.0, 60.0, -0.050208333333333334),
    (1.0, 1.0, 1.0, -3.574233234109669),
    (1.0, 1.0, 2.7, -0.5767672079071148),
    (1.0, 1.0, 10.0, -0.10500024804910636),
    (1.0, 1.0, 60.0, -0.016805555555555556),
]
