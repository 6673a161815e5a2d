"""Gradient descent with loss-based learning rates and margin certificates.

Late-phase GD drives the loss to e^{-hundreds}, so the raw quantities
(loss, gradient, learning rate) leave float64 range. Everything is
carried in a relative frame anchored once per epoch: with anchor a =
log(1/loss) at the last epoch end, the scheduler's alpha is exactly
the relative step, and the update reads theta' = theta + c G with
c = alpha * e^{a - x} and G = e^x (-grad loss) both order one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .autodiff import backward
from .datasets import Dataset
from .gradflow import PointEval, evaluate_point
from .losses import LossDomainError, LossSpec
from .margin import effective_margins
from .models import (HomogeneousModel, ParamVector, as_params,
                     per_sample_grad_norms)

R_UP = 2.0 ** (1.0 / 5.0)
R_DOWN = 2.0 ** (1.0 / 10.0)


class ReframeError(RuntimeError):
    """Relative step left float range: refresh the frame anchor."""


@dataclass(frozen=True)
class RelativeLossFrame:
    """Loss bookkeeping relative to the previous epoch's loss.

    f_tilde is the log of the previous mean loss; eta_hat is the step
    on the relative loss, equal to the scheduler's alpha. The physical
    rate is eta = eta_hat * e^{-f_tilde}.
    """

    f_tilde: float
    eta_hat: float
    q_threshold: float = 30.0


def relative_loss(model: HomogeneousModel, theta, batch: Dataset,
                  frame: RelativeLossFrame, spec: LossSpec) -> float:
    """Mean batch loss divided by e^{f_tilde}; finite while the loss
    stays within ~e^{600} of the anchor.

    For exponential-family f the ratio is summed exactly in log space.
    For the logistic family the exact per-sample loss log1p(e^{-q}) is
    used until every margin clears q_threshold, beyond which it equals
    e^{-q} up to relative error e^{-q_threshold}.
    """
    q = effective_margins(model, theta, batch)
    log_b = math.log(batch.n)
    if spec.name == "exp" or np.all(q > frame.q_threshold):
        fq = spec.f(q)
        m = float(np.min(fq))
        log_inv = m - math.log(float(np.sum(np.exp(m - fq))))
        return math.exp(-log_inv - log_b - frame.f_tilde)
    # some margin is still small, so the loss (hence e^{-f_tilde} after
    # one epoch) is bounded away from the underflow regime
    per_sample = np.logaddexp(0.0, -q)  # log1p(e^{-q}), all regimes
    return float(np.sum(per_sample)) / batch.n * math.exp(-frame.f_tilde)


def gd_step(model: HomogeneousModel, dataset: Dataset, spec: LossSpec,
            theta: ParamVector, eta_hat: float, anchor_x: float,
            ev: PointEval | None = None) -> tuple[ParamVector, PointEval, float]:
    """One descent step theta' = theta + c G, c = eta_hat e^{a - x}.

    Exactly theta - eta grad(mean loss) for eta = eta_hat / mean loss
    at the anchor. Returns the new parameters, the evaluation at the
    starting point, and the applied scaled step c.
    """
    if eta_hat != 0.0 and not 1e-300 <= eta_hat <= 1e300:
        raise ReframeError(
            f"eta_hat={eta_hat} outside [1e-300, 1e300]; refresh the "
            "frame anchor to the current loss")
    if ev is None:
        ev = evaluate_point(model, theta, dataset, spec)
    c = eta_hat * math.exp(min(anchor_x - ev.x, 700.0))
    if c == 0.0:
        return theta, ev, 0.0
    return ParamVector(theta.data + c * ev.G), ev, c


def gd_step_direct(model: HomogeneousModel, dataset: Dataset, spec: LossSpec,
                   theta: ParamVector, eta: float) -> ParamVector:
    """theta - eta grad(mean loss) through plain float64, no frame.

    Only valid while the mean loss stays above ~1e-290; used to check
    that the relative frame changes nothing but the arithmetic path.
    """
    q = effective_margins(model, theta, dataset)
    phi, tape = model.forward(theta, dataset.X)
    ell_prime = np.exp(-spec.f(q)) * spec.f_prime(q)
    if dataset.is_binary:
        seed = ell_prime * dataset.y / dataset.n
    else:
        raise NotImplementedError("direct path exercises binary models")
    grad = -backward(tape, seed)
    return ParamVector(theta.data - eta * grad)


@dataclass(frozen=True)
class LrSchedulerState:
    """Loss-based relative learning rate with up/down factors."""

    alpha: float
    last_log_inv_loss: float
    r_up: float = R_UP
    r_down: float = R_DOWN

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must stay positive")


@dataclass(frozen=True)
class EpochOutcome:
    retries: int
    flagged: bool
    alpha_used: float


def loss_based_lr_epoch(state: LrSchedulerState, train_fn, eval_fn,
                        max_retries: int = 60):
    """One epoch of the accept-or-retry loss-based schedule.

    train_fn(alpha) runs an epoch from the stored starting point and
    returns candidate parameters; eval_fn(theta) returns log(1/loss).
    On improvement the step is kept and alpha grows by r_up; otherwise
    alpha shrinks by r_down and the epoch is retrained, up to
    max_retries, after which the epoch is abandoned and flagged.
    """
    alpha = state.alpha
    for retry in range(max_retries + 1):
        candidate = train_fn(alpha)
        new_x = eval_fn(candidate)
        if new_x > state.last_log_inv_loss:
            new_state = replace(state, alpha=alpha * state.r_up,
                                last_log_inv_loss=new_x)
            return new_state, candidate, EpochOutcome(retry, False, alpha)
        alpha /= state.r_down
    return (replace(state, alpha=alpha), None,
            EpochOutcome(max_retries + 1, True, alpha))


# GD margin gamma_hat = e^{phi(loss)} / rho^L. phi is a fixed curve
# determined by the loss family, the order L, and the log-loss u0 at
# the first separated epoch; it damps log g(x) just enough to absorb
# the second-order discretization error allowed by (S5).

class PhiCurve:
    """phi(u) = log g(u) + T(u) in u = log(1/loss) coordinates.

    T(U) = int_U^inf (lambda(u) - e^{-u} M(u)) du where M is the
    running max of F(u) = e^u lambda(u) (1 + 2(1 + lambda/L) mu(u)),
    lambda = g'/g and mu(u) = u0/(2u). F dips at most once before
    climbing like e^u, so M is max(F(u0), F(u)) up to the recovery
    point u_star and equals F beyond; past u_star the integrand
    reduces to -2 lambda mu (1 + lambda/L). Increments are accumulated
    so successive evaluations at growing u stay exactly consistent.
    """

    def __init__(self, spec: LossSpec, order_L: float, u0: float):
        if u0 <= spec.f_at_bf:
            raise LossDomainError(
                f"anchor log(1/loss) = {u0} not separated for {spec.name}")
        self.spec = spec
        self.order_L = float(order_L)
        self.u0 = float(u0)
        self._log_f0 = self._log_F(self.u0)
        self.u_star = self._find_recovery()
        self._cache_u = None
        self._cache_t = None

    def _lam(self, u):
        return self.spec.g_prime(u) / self.spec.g(u)

    def _mu(self, u):
        return self.u0 / (2.0 * u)

    def _log_F(self, u):
        lam = self._lam(u)
        return float(u + np.log(lam)
                     + np.log1p(2.0 * (1.0 + lam / self.order_L) * self._mu(u)))

    def _find_recovery(self) -> float:
        u0 = self.u0
        h = 1e-6 * max(1.0, u0)
        if self._log_F(u0 + h) >= self._log_f0:
            return u0  # F climbs from the start; M == F everywhere
        lo = u0
        hi = u0 + 1.0
        while self._log_F(hi) < self._log_f0:
            lo, hi = hi, hi + 1.0
            if hi > u0 + 200.0:
                raise RuntimeError("F(u) failed to recover; loss family "
                                   "violates the single-dip assumption")
        return float(brentq(lambda u: self._log_F(u) - self._log_f0, lo, hi,
                            xtol=1e-13, rtol=1e-15))

    def _tail_integrand(self, u):
        lam = self._lam(u)
        return -2.0 * lam * self._mu(u) * (1.0 + lam / self.order_L)

    def _dip_integrand(self, u):
        log_m = max(self._log_f0, self._log_F(u))
        return self._lam(u) - math.exp(log_m - u)

    def _tail(self, U: float) -> float:
        val, _ = quad(self._tail_integrand, U, np.inf,
                      epsabs=1e-13, epsrel=1e-12, limit=400)
        return val

    def _t_full(self, U: float) -> float:
        if U >= self.u_star:
            return self._tail(U)
        dip, _ = quad(self._dip_integrand, U, self.u_star,
                      epsabs=1e-13, epsrel=1e-12, limit=400)
        return dip + self._tail(self.u_star)

    def correction(self, u: float) -> float:
        """T(u) <= 0; the log-gap between gamma_hat and tilde margin."""
        if u < self.u0 - 1e-9:
            raise LossDomainError(
                f"phi evaluated at u={u} above the anchor loss (u0={self.u0})")
        u = max(u, self.u0)
        if self._cache_u is None or u < self._cache_u:
            t = self._t_full(u)
        elif u == self._cache_u:
            return self._cache_t
        else:
            # removed mass int_{cache}^{u} iota is accumulated exactly once
            a, b = self._cache_u, u
            if b <= self.u_star:
                seg, _ = quad(self._dip_integrand, a, b,
                              epsabs=1e-13, epsrel=1e-12, limit=400)
            elif a >= self.u_star:
                seg, _ = quad(self._tail_integrand, a, b,
                              epsabs=1e-13, epsrel=1e-12, limit=400)
            else:
                s1, _ = quad(self._dip_integrand, a, self.u_star,
                             epsabs=1e-13, epsrel=1e-12, limit=400)
                s2, _ = quad(self._tail_integrand, self.u_star, b,
                             epsabs=1e-13, epsrel=1e-12, limit=400)
                seg = s1 + s2
            t = self._cache_t - seg
        self._cache_u, self._cache_t = u, t
        return t

    def phi(self, u: float) -> float:
        return float(np.log(self.spec.g(u))) + self.correction(u)


def log_kappa(spec: LossSpec, x: float, order_L: float) -> float:
    """log of the local-smoothness scale sup_{u >= x} e^{-u} u^{2-2/L}
    / g'(u)^2, by grid search; the e^{-u} factor kills the tail."""
    us = np.linspace(x, x + 60.0, 2400)
    vals = (-us + (2.0 - 2.0 / order_L) * np.log(us)
            - 2.0 * np.log(spec.g_prime(us)))
    return float(np.max(vals))


@dataclass(frozen=True)
class BConstants:
    """Sampled estimates of the unit-sphere suprema of the margin, its
    gradient norm, and its curvature. Sampling undershoots a true sup,
    so downstream step-size checks are conservative-by-sampling."""

    b0: float  # sup q_n over the sphere
    b1: float  # sup ||grad q_n||
    b2: float  # sup ||hess q_n|| (directional probes)
    n_sphere: int
    n_curvature: int


def estimate_b_constants(model: HomogeneousModel, dataset: Dataset,
                         rng: np.random.Generator, n_sphere: int = 10_000,
                         n_curvature: int = 1_000,
                         witness: ParamVector | None = None) -> BConstants:
    if not dataset.is_binary:
        raise NotImplementedError("sphere constants assume binary margins")
    d = model.param_count
    b0 = -math.inf
    b1 = 0.0
    draws = rng.normal(size=(n_sphere, d))
    draws /= np.linalg.norm(draws, axis=1, keepdims=True)
    if witness is not None:
        draws[0] = witness.unit()  # current direction is a known witness
    for theta_hat in draws:
        p = ParamVector(theta_hat)
        phi, _ = model.forward(p, dataset.X)
        b0 = max(b0, float(np.max(dataset.y * np.atleast_1d(phi))))
        b1 = max(b1, float(np.max(per_sample_grad_norms(model, p, dataset.X))))
    h = 1e-4
    b2 = 0.0
    for _ in range(n_curvature):
        theta_hat = rng.normal(size=d)
        theta_hat /= np.linalg.norm(theta_hat)
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        p0, _ = model.forward(ParamVector(theta_hat), dataset.X)
        pp, _ = model.forward(ParamVector(theta_hat + h * v), dataset.X)
        pm, _ = model.forward(ParamVector(theta_hat - h * v), dataset.X)
        curv = np.abs(np.atleast_1d(pp) - 2.0 * np.atleast_1d(p0)
                      + np.atleast_1d(pm)) / h**2
        b2 = max(b2, float(np.max(curv)))
    return BConstants(b0=b0, b1=b1, b2=b2, n_sphere=n_sphere,
                      n_curvature=n_curvature)


@dataclass
class GdMarginState:
    """Everything anchored at the first separated epoch t0."""

    spec: LossSpec
    order_L: float
    u0: float
    rho0: float
    phi_curve: PhiCurve
    b: BConstants
    c_eta: float
    c_eta_provisional: bool
    log_gamma_hat0: float
    clamped: bool = False

    def mu(self, x: float) -> float:
        return self.u0 / (2.0 * x)

    def lam(self, x: float) -> float:
        return float(self.spec.g_prime(x) / self.spec.g(x))

    def log_kappa(self, x: float) -> float:
        return log_kappa(self.spec, x, self.order_L)

    def log_h(self, x: float) -> float:
        """log of the (S5) learning-rate ceiling mu / (C_eta kappa)."""
        return math.log(self.mu(x)) - math.log(self.c_eta) - self.log_kappa(x)

    def log_gamma_hat(self, x: float, log_rho: float) -> float:
        """log(e^{phi} / rho^L), clamped under the smoothed margin."""
        val = self.phi_curve.phi(x) - self.order_L * log_rho
        log_tilde = float(np.log(self.spec.g(x))) - self.order_L * log_rho
        if val > log_tilde:
            if val - log_tilde > 1e-12:
                self.clamped = True
            val = log_tilde
        return val


def make_margin_state(model: HomogeneousModel, theta: ParamVector,
                      dataset: Dataset, spec: LossSpec, x0: float,
                      rng: np.random.Generator, n_sphere: int = 10_000,
                      n_curvature: int = 1_000) -> GdMarginState:
    L = model.order_L
    curve = PhiCurve(spec, L, x0)
    rho0 = theta.rho
    log_hat0 = curve.phi(x0) - L * math.log(rho0)
    b = estimate_b_constants(model, dataset, rng, n_sphere=n_sphere,
                             n_curvature=n_curvature, witness=theta)
    gamma_hat0 = math.exp(log_hat0)
    m = min(gamma_hat0 ** (-2.0 + 2.0 / L), b.b0 ** (-2.0 + 2.0 / L))
    provisional = False
    if spec.name == "exp":
        c_eta = 0.5 * (b.b1**2 + rho0 ** (-L) * b.b2) * m
    else:
        p = spec.p
        if p is None:
            p = 1.0  # custom loss without a tail exponent: flag the result
            provisional = True
        r = (b.b0 / gamma_hat0) ** p
        c_eta = (0.5 * b.b1
                 * (r * b.b1 + 2.0 ** (p + 1.0) / x0 * (p * b.b1 + b.b2))
                 * r * m)
    return GdMarginState(spec=spec, order_L=L, u0=x0, rho0=rho0,
                         phi_curve=curve, b=b, c_eta=c_eta,
                         c_eta_provisional=provisional,
                         log_gamma_hat0=log_hat0)


@dataclass(frozen=True)
class S5Check:
    passed: bool
    log_ratio: float  # log(eta / H); negative is headroom

    @property
    def ratio(self) -> float:
        return math.exp(min(self.log_ratio, 700.0))


def check_s5(log_eta: float, x: float, mstate: GdMarginState) -> S5Check:
    log_ratio = log_eta - mstate.log_h(x)
    return S5Check(passed=log_ratio <= 0.0, log_ratio=log_ratio)


def gd_smoothed_margin(mstate: GdMarginState, x: float,
                       log_rho: float) -> float:
    return math.exp(mstate.log_gamma_hat(x, log_rho))


def train_gd(model: HomogeneousModel, theta0, dataset: Dataset,
             spec: LossSpec, *, epochs: int, alpha0: float = 0.1,
             mode: str = "loss_based", s5_guard: bool = False,
             guard_safety: float = 0.5, seed: int = 0,
             n_sphere: int = 10_000, n_curvature: int = 1_000,
             max_retries: int = 60) -> dict:
    """Full-batch GD with the loss-based schedule and margin monitors.

    mode "loss_based" runs the accept-or-retry schedule; "constant_alpha"
    keeps alpha fixed (the physical rate still scales with 1/loss via
    the per-epoch anchor). Monitor series start at the first separated
    epoch; entries conditioned on (S5) are only appended when the step
    passed check_s5.
    """
    if mode not in ("loss_based", "constant_alpha"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    theta = as_params(theta0)
    ev = evaluate_point(model, theta, dataset, spec)
    sched = LrSchedulerState(alpha=alpha0, last_log_inv_loss=ev.x)
    mstate: GdMarginState | None = None
    log_hat_prev = None
    log_sum_eta = -math.inf
    records: list[dict] = []
    monitors: dict[str, list] = {
        "rho_identity": [], "p2_lower": [], "p2_upper": [], "p3_slack": [],
        "p4_slack": [], "d_log_hat": [], "grad_bound": [], "s5_log_ratio": [],
        "euler_gap": [],
    }
    flagged_epochs: list[int] = []

    def maybe_separate(x: float):
        nonlocal mstate, log_hat_prev
        if mstate is None and x > spec.f_at_bf + 1e-12:
            mstate = make_margin_state(model, theta, dataset, spec, x, rng,
                                       n_sphere=n_sphere,
                                       n_curvature=n_curvature)
            log_hat_prev = mstate.log_gamma_hat(x, math.log(theta.rho))

    maybe_separate(ev.x)
    for epoch in range(epochs):
        anchor_x = ev.x
        start_theta, start_ev = theta, ev
        attempt: dict = {}

        def train_fn(alpha):
            a = alpha
            if s5_guard and mstate is not None:
                cap = guard_safety * math.exp(
                    mstate.log_h(start_ev.x) - anchor_x)
                a = min(a, cap)
            cand, _, c = gd_step(model, dataset, spec, start_theta, a,
                                 anchor_x, ev=start_ev)
            attempt["alpha"] = a
            attempt["c"] = c
            attempt["theta"] = cand
            return cand

        def eval_fn(cand):
            attempt["ev"] = evaluate_point(model, cand, dataset, spec)
            return attempt["ev"].x

        if mode == "loss_based":
            sched, accepted, outcome = loss_based_lr_epoch(
                sched, train_fn, eval_fn, max_retries=max_retries)
            if outcome.flagged:
                flagged_epochs.append(epoch)
                records.append({"epoch": epoch, "flagged": True,
                                "alpha": sched.alpha,
                                "retries": outcome.retries,
                                "log_inv_loss": ev.x})
                break
        else:
            accepted = train_fn(sched.alpha)
            new_x = eval_fn(accepted)
            outcome = EpochOutcome(0, False, sched.alpha)
            sched = replace(sched, last_log_inv_loss=new_x)

        theta = attempt["theta"]
        prev_ev, ev = start_ev, attempt["ev"]
        c = attempt["c"]
        log_eta = math.log(attempt["alpha"]) + anchor_x
        log_sum_eta = float(np.logaddexp(log_sum_eta, log_eta))
        maybe_separate(ev.x)

        s5 = None
        # past x ~ 1e6 the ulp of log-scale quantities swamps the monitor
        # tolerances; the unguarded schedule can race far beyond that
        if (mstate is not None and prev_ev.x >= mstate.u0 - 1e-12
                and ev.x <= 1e6):
            s5 = check_s5(log_eta, prev_ev.x, mstate)
            monitors["s5_log_ratio"].append(s5.log_ratio)
            theta_dot_g = float(start_theta.data @ prev_ev.G)
            drho2 = theta.rho**2 - start_theta.rho**2
            predicted = 2.0 * c * theta_dot_g + c**2 * prev_ev.g_norm**2
            scale = max(abs(drho2), abs(predicted), 1e-300)
            monitors["rho_identity"].append(abs(drho2 - predicted) / scale)
            gap = theta_dot_g / model.order_L - prev_ev.V
            monitors["euler_gap"].append(
                gap / max(abs(theta_dot_g) / model.order_L, 1e-300))
            monitors["p2_lower"].append(
                (drho2 - 2.0 * c * model.order_L * prev_ev.V) / scale)
            lam = mstate.lam(prev_ev.x)
            mu = mstate.mu(prev_ev.x)
            if s5.passed:
                monitors["p2_upper"].append(
                    (2.0 * c * theta_dot_g
                     * (1.0 + lam * mu / model.order_L) - drho2) / scale)
                monitors["p3_slack"].append(
                    1.0 - (1.0 - mu) * c * prev_ev.g_norm**2
                    - math.exp(prev_ev.x - ev.x))
            if prev_ev.g_norm > 0.0:
                monitors["grad_bound"].append(
                    math.log(2.0 * mstate.c_eta) + mstate.log_kappa(prev_ev.x)
                    - (2.0 * math.log(prev_ev.g_norm) - prev_ev.x))
            if ev.x >= mstate.u0 - 1e-12:  # constant mode can move back up
                log_hat = mstate.log_gamma_hat(ev.x, math.log(theta.rho))
                if log_hat_prev is not None:
                    d_hat = log_hat - log_hat_prev
                    monitors["d_log_hat"].append(d_hat)
                    if s5.passed:
                        u_g = prev_ev.G - (theta_dot_g / prev_ev.rho**2) \
                            * start_theta.data
                        rhs = (model.order_L * prev_ev.rho**2
                               * float(u_g @ u_g) / theta_dot_g**2
                               * (math.log(theta.rho)
                                  - math.log(start_theta.rho)))
                        monitors["p4_slack"].append(d_hat - rhs)
                log_hat_prev = log_hat
            else:
                log_hat_prev = None

        rec = {
            "epoch": epoch,
            "alpha": attempt["alpha"],
            "retries": outcome.retries,
            "flagged": False,
            "log_inv_loss": ev.x,
            "log10_loss": -ev.x / math.log(10.0),
            "rho": theta.rho,
            "q_min": float(np.min(ev.q)),
            "log_sum_eta": log_sum_eta,
            "beta": ev.beta,
        }
        if mstate is not None and ev.x > spec.f_at_bf:
            g_val = float(spec.g(ev.x))
            if g_val > 0.0:
                rec["log_tilde"] = (math.log(g_val)
                                    - model.order_L * math.log(theta.rho))
            if log_hat_prev is not None:
                rec["log_hat"] = log_hat_prev
            rec["bar_gamma"] = rec["q_min"] / theta.rho**model.order_L
        if s5 is not None:
            rec["s5_log_ratio"] = s5.log_ratio
        records.append(rec)
    return {
        "theta": theta,
        "ev": ev,
        "scheduler": sched,
        "records": records,
        "monitors": monitors,
        "margin_state": mstate,
        "flagged_epochs": flagged_epochs,
        "log_sum_eta": log_sum_eta,
    }
