"""Optimality certificates for the minimum-norm margin problem.

The reference problem fixes the margin scale: minimize ||theta||^2 / 2
subject to every sample margin reaching one. Training never lands on
that boundary, but homogeneity lets any separating checkpoint be
rescaled onto it, and the loss gradient then supplies explicit
multipliers. The resulting certificate quantifies first-order
optimality: the stationarity residual shrinks as the parameter
direction aligns with the gradient, and the complementarity residual
shrinks with the loss exponent.

The scaled problem satisfies MFCQ at every feasible point (take the
point itself as the constraint-qualification direction; homogeneity
makes each active constraint strictly decrease along it), so the
certificates certify genuine first-order necessary conditions. This is
structural and is not re-checked at runtime.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .gradflow import PointEval, evaluate_point
from .losses import LossSpec
from .models import HomogeneousModel, ParamVector, as_params


class NotSeparableError(ValueError):
    """Raised when a nonpositive margin blocks the feasibility scaling."""


def feasible_scaling(theta, q_min: float, order_L: float) -> ParamVector:
    """Scale theta onto the constraint boundary: min margin becomes 1."""
    if q_min <= 0.0:
        raise NotSeparableError(
            f"min margin {q_min} is not positive; no feasible rescaling")
    theta = as_params(theta)
    return ParamVector(theta.data / q_min ** (1.0 / order_L))


@dataclass(frozen=True)
class KktCertificate:
    """Approximate first-order optimality data at one checkpoint.

    epsilon bounds the stationarity gap of the rescaled point, delta
    the worst complementarity product. epsilon_beta recomputes epsilon
    through the alignment cosine; the two must agree to rounding.
    eps_bound and delta_bound are the predicted ceilings (anchored at
    the first separated time), present when the anchor data was given.
    """

    theta_scaled: ParamVector
    lambdas: np.ndarray
    epsilon: float
    epsilon_beta: float
    delta: float
    beta: float
    q_min: float
    rho: float
    log_inv_loss: float
    eps_bound: float | None
    delta_bound: float | None
    big_k: float | None
    b_g: float | None


def build_certificate(model: HomogeneousModel, theta, dataset: Dataset,
                      spec: LossSpec, *, ev: PointEval | None = None,
                      log_tilde_t0: float | None = None,
                      b1: float | None = None) -> KktCertificate:
    """Certificate at theta with multipliers read off the loss gradient.

    The multiplier for sample n is q_min^{1-2/L} rho w_n f'(q_n)
    divided by the gradient norm, with w_n the unit-sum loss weights;
    every exponential factor cancels inside the ratio. Passing the log
    of the smoothed margin at the first separated time (and, when the
    loss needs it, the sampled sup of the margin gradient over the unit
    sphere) also fills in the predicted epsilon and delta ceilings.
    """
    theta = as_params(theta)
    if not dataset.is_binary:
        raise NotImplementedError(
            "certificate multipliers assume binary hard margins")
    if ev is None:
        ev = evaluate_point(model, theta, dataset, spec)
    q_min = float(np.min(ev.q))
    if q_min <= 0.0:
        raise NotSeparableError(
            f"min margin {q_min} is not positive; certificate undefined")
    if ev.g_norm == 0.0:
        raise ValueError("gradient vanished: the direction is exactly "
                         "stationary and the multipliers are undefined")
    order_L = model.order_L
    scale = q_min ** (1.0 / order_L)
    lambdas = (q_min ** (1.0 - 2.0 / order_L) * ev.rho
               * ev.weights * ev.fprime / ev.g_norm)
    unit_g = ev.G / ev.g_norm
    epsilon = float(np.linalg.norm(theta.data - ev.rho * unit_g)) / scale
    epsilon_beta = ev.rho * math.sqrt(max(2.0 - 2.0 * ev.beta, 0.0)) / scale
    delta = float(np.max(lambdas * (ev.q / q_min - 1.0)))
    eps_bound = None
    delta_bound = None
    if log_tilde_t0 is not None:
        tilde0 = math.exp(log_tilde_t0)
        eps_bound = (math.sqrt(2.0) / tilde0 ** (1.0 / order_L)
                     * math.sqrt(max(1.0 - ev.beta, 0.0)))
        if spec.K is not None and spec.b_g is not None and ev.x >= spec.b_g:
            if spec.K == 1.0:
                growth = 1.0
            else:
                if b1 is None:
                    raise ValueError(
                        "delta ceiling needs the sampled gradient sup b1 "
                        f"for {spec.name} (loss-ratio constant K > 1)")
                growth = (b1 / tilde0) ** math.log2(spec.K)
            c2 = (2.0 * math.e * dataset.n * spec.K ** 2
                  / (order_L * tilde0 ** (2.0 / order_L)) * growth)
            delta_bound = c2 / ev.x
    return KktCertificate(
        theta_scaled=ParamVector(theta.data / scale), lambdas=lambdas,
        epsilon=epsilon, epsilon_beta=epsilon_beta, delta=delta,
        beta=ev.beta, q_min=q_min, rho=ev.rho, log_inv_loss=ev.x,
        eps_bound=eps_bound, delta_bound=delta_bound,
        big_k=spec.K, b_g=spec.b_g,
    )


@dataclass
class Beta2Accumulator:
    """Running discrete form of the alignment integral: the sum of
    (beta^-2 - 1) dlog rho over steps is capped by the log-gain of the
    smoothed margin divided by the order."""

    order_L: float
    total: float = 0.0

    def update(self, beta: float, d_log_rho: float) -> None:
        self.total += (beta ** -2.0 - 1.0) * d_log_rho

    def bound_slack(self, log_tilde_start: float, log_tilde_end: float,
                    tol: float = 1e-6) -> float:
        """Nonnegative when the integral bound holds for this stretch."""
        cap = (log_tilde_end - log_tilde_start) / self.order_L
        return cap + tol - self.total


# Hard-margin reference solver for the kernel view: with per-sample
# feature vectors h_n (for networks, margin gradients at a frozen
# direction), minimize ||w||^2/2 subject to y_n <w, h_n> >= 1.

def svm_oracle(features, labels, *, feas_tol: float = 1e-9,
               mult_tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Exact desk-scale solve by support-subset enumeration.

    For each candidate support set the equality-constrained problem is
    a linear solve on the Gram matrix; the first candidate whose
    multipliers are nonnegative and whose solution is primal feasible
    satisfies the full KKT system of a convex problem, hence is the
    global optimum. Returns (w, geometric margin = 1/||w||).
    """
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    n = h.shape[0]
    if n > 32:
        raise ValueError(f"enumeration oracle is desk-scale; got {n} > 32")
    z = y[:, None] * h
    gram = z @ z.T
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            s = list(subset)
            g_s = gram[np.ix_(s, s)]
            mu, *_ = np.linalg.lstsq(g_s, np.ones(size), rcond=None)
            if not np.allclose(g_s @ mu, 1.0, atol=1e-8):
                continue  # singular and inconsistent subset
            if float(np.min(mu)) < -mult_tol:
                continue
            w = z[s].T @ mu
            if float(np.min(z @ w)) >= 1.0 - feas_tol:
                return w, 1.0 / float(np.linalg.norm(w))
    raise NotSeparableError(
        "no support subset satisfies KKT: data is not separable in "
        "feature space")


def svm_dual_projected_gradient(features, labels, *, iters: int = 100_000,
                                tol: float = 1e-14
                                ) -> tuple[np.ndarray, float]:
    """Independent route to the same optimum: projected gradient ascent
    on the box-free dual max sum(mu) - mu' G mu / 2, mu >= 0."""
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    z = y[:, None] * h
    gram = z @ z.T
    step = 1.0 / float(np.linalg.norm(gram, 2))
    mu = np.zeros(h.shape[0])
    for _ in range(iters):
        nxt = np.maximum(0.0, mu + step * (1.0 - gram @ mu))
        if float(np.max(np.abs(nxt - mu))) < tol * max(1.0, float(np.max(nxt))):
            mu = nxt
            break
        mu = nxt
    w = z.T @ mu
    worst = float(np.min(z @ w))
    if worst < 0.5:  # dual diverges on infeasible data; catch it early
        raise NotSeparableError(
            f"dual iterate is far from feasibility (min margin {worst}); "
            "data looks inseparable in feature space")
    return w, 1.0 / float(np.linalg.norm(w))


def direction_gap_to_svm(theta_final, svm_w) -> float:
    """Angle in radians between the trained direction and the reference
    max-margin direction."""
    u = np.asarray(getattr(theta_final, "data", theta_final),
                   dtype=np.float64)
    v = np.asarray(svm_w, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("directions must be nonzero")
    return float(np.arccos(np.clip(u @ v / (nu * nv), -1.0, 1.0)))
