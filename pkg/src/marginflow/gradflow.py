"""Gradient-flow integrator with invariant monitors, plus the polar
Mexican-hat simulation.

The flow is stiff: the gradient magnitude decays like the loss itself.
Everything is therefore phrased through the scaled gradient
G = exp(x) * (-grad loss) with x = log(1/loss); G has O(1) entries and
the true gradient is never materialized. A step of size dt multiplies
G by dt * exp(-x), so the controlled variable is the scaled step
w = dt * exp(-x0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .autodiff import NonFiniteError, backward
from .datasets import Dataset
from .losses import LossSpec
from .margin import score_gaps, soft_margins
from .models import HomogeneousModel, ParamVector, as_params


@dataclass(frozen=True)
class PointEval:
    """Loss, margins, and scaled gradient at one parameter point."""

    x: float  # log(1/loss), sum convention
    q: np.ndarray  # hard margins
    q_eff: np.ndarray  # margins inside the loss (q_tilde for multi-class)
    weights: np.ndarray  # softmax weights, sum to 1
    fprime: np.ndarray  # f'(q_eff)
    V: float  # sum_n w_n f'(q_n) q_n; nu = loss * V
    G: np.ndarray  # exp(x) * (-grad loss)
    g_norm: float
    beta: float  # cosine(theta, -grad loss)
    rho: float

    @property
    def log_grad_norm(self) -> float:
        return math.log(self.g_norm) - self.x


def evaluate_point(model: HomogeneousModel, theta, dataset: Dataset,
                   spec: LossSpec) -> PointEval:
    """One forward plus one seeded backward; all exponents stay O(1)."""
    theta = as_params(theta)
    phi, tape = model.forward(theta, dataset.X)
    phi = np.atleast_1d(phi)
    if dataset.is_binary:
        q = dataset.y * phi
        q_eff = q
    else:
        gaps = score_gaps(phi, dataset.y)
        q = np.min(gaps, axis=1)
        q_eff = soft_margins(gaps)
    fq = spec.f(q_eff)
    m = float(np.min(fq))  # inline logsumexp; scipy's costs ~100us here
    w = np.exp(m - fq)
    x = m - math.log(float(np.sum(w)))
    w *= math.exp(x - m)
    fp = spec.f_prime(q_eff)
    if dataset.is_binary:
        seed = w * fp * dataset.y
    else:
        # per-sample split of grad q_tilde over the competing classes
        pi = np.exp(q_eff[:, None] - score_gaps(phi, dataset.y))
        seed = np.zeros(phi.shape)
        rows = np.arange(dataset.n)
        mask = np.ones(phi.shape, dtype=bool)
        mask[rows, dataset.y] = False
        seed[mask] = (-(w * fp)[:, None] * pi).ravel()
        seed[rows, dataset.y] = w * fp
    G = backward(tape, seed)
    g_norm = float(np.linalg.norm(G))
    beta = float(theta.data @ G / (theta.rho * g_norm)) if g_norm > 0 else 0.0
    return PointEval(
        x=x, q=q, q_eff=q_eff, weights=w, fprime=fp,
        V=float(np.sum(w * fp * q_eff)), G=G, g_norm=g_norm,
        beta=beta, rho=theta.rho,
    )


def is_separated(ev: PointEval, spec: LossSpec) -> bool:
    """(B4): total loss below ell(b_f), i.e. x beyond f(b_f)."""
    return ev.x > spec.f_at_bf


def log_tilde_margin(ev: PointEval, spec: LossSpec, order_L: float) -> float:
    g = float(spec.g(ev.x))
    if g <= 0.0:  # x can sit within one ulp of the separation threshold
        return -math.inf
    return math.log(g) - order_L * math.log(ev.rho)


def nu_lower_slack(ev: PointEval, spec: LossSpec) -> float:
    """log V - log(g/g')(x); nonnegative once separated."""
    bound = float(spec.g(ev.x) / spec.g_prime(ev.x))
    if bound <= 0.0:
        return math.inf
    return math.log(ev.V) - math.log(bound)


@dataclass(frozen=True)
class FlowState:
    t: float
    theta: ParamVector
    ev: PointEval
    steps: int = 0
    rejects: int = 0


@dataclass(frozen=True)
class StepInfo:
    dt: float  # physical time advanced (may overflow to inf late on)
    dt_scaled: float  # dt * exp(-x0), the controlled quantity
    next_dt_scaled: float  # proposal for the following step
    delta_rho_sq: float  # rho1^2 - rho0^2, cancellation-free
    delta_theta_hat: float  # ||theta_hat1 - theta_hat0||
    halvings: int


class FlowAbort(RuntimeError):
    """Step halving exhausted or non-finite values with no valid retreat."""


def init_flow(model: HomogeneousModel, theta0, dataset: Dataset,
              spec: LossSpec) -> FlowState:
    theta0 = as_params(theta0)
    return FlowState(t=0.0, theta=theta0,
                     ev=evaluate_point(model, theta0, dataset, spec))


def propose_dt_scaled(ev: PointEval, step_tol: float) -> float:
    """Scaled step targeting d(log 1/loss) ~ step_tol * max(1, x)."""
    if ev.g_norm == 0.0:
        return 0.0
    return step_tol * max(1.0, abs(ev.x)) / ev.g_norm**2


def flow_step(model: HomogeneousModel, dataset: Dataset, spec: LossSpec,
              state: FlowState, dt_scaled: float, step_tol: float = 1e-4,
              max_halvings: int = 60) -> tuple[FlowState, StepInfo]:
    """One adaptive RK4 step of d theta/dt = -grad loss.

    Acceptance: the change of x = log(1/loss) is at most
    step_tol * max(1, |x|) and never negative beyond 1e-9 (descent).
    Rejected trials halve dt; stages that produce non-finite values
    count as rejections.
    """
    ev0 = state.ev
    if ev0.g_norm == 0.0 or dt_scaled == 0.0:
        return state, StepInfo(0.0, 0.0, 0.0, 0.0, 0.0, 0)
    theta0 = state.theta
    x0 = ev0.x
    cap = step_tol * max(1.0, abs(x0))
    halvings = 0
    while True:
        try:
            k1 = ev0.G
            e2 = evaluate_point(model, theta0.data + (dt_scaled / 2) * k1,
                                dataset, spec)
            k2 = math.exp(min(x0 - e2.x, 50.0)) * e2.G
            e3 = evaluate_point(model, theta0.data + (dt_scaled / 2) * k2,
                                dataset, spec)
            k3 = math.exp(min(x0 - e3.x, 50.0)) * e3.G
            e4 = evaluate_point(model, theta0.data + dt_scaled * k3,
                                dataset, spec)
            k4 = math.exp(min(x0 - e4.x, 50.0)) * e4.G
            dtheta = (dt_scaled / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            theta1 = ParamVector(theta0.data + dtheta)
            ev1 = evaluate_point(model, theta1, dataset, spec)
            dx = ev1.x - x0
            ok = abs(dx) <= cap and dx >= -1e-9
        except NonFiniteError:
            ok = False
            dx = math.nan
        if ok:
            break
        halvings += 1
        if halvings > max_halvings:
            raise FlowAbort(
                f"step rejected {max_halvings} times at t={state.t}, "
                f"x={x0}, last dx={dx}"
            )
        dt_scaled /= 2.0
    # re-anchor the scale to the new x; steer |dx| toward 0.6 * cap
    gain = min(2.0, max(0.5, 0.6 * cap / max(abs(dx), cap / 100.0)))
    nxt = dt_scaled * math.exp(x0 - ev1.x) * gain
    dt = dt_scaled * math.exp(x0) if x0 < 700.0 else math.inf
    info = StepInfo(
        dt=dt,
        dt_scaled=dt_scaled,
        next_dt_scaled=nxt,
        delta_rho_sq=float(2.0 * (theta0.data @ dtheta) + dtheta @ dtheta),
        delta_theta_hat=float(np.linalg.norm(theta1.unit() - theta0.unit())),
        halvings=halvings,
    )
    return (
        FlowState(t=state.t + dt, theta=theta1, ev=ev1,
                  steps=state.steps + 1, rejects=state.rejects + halvings),
        info,
    )


def weight_growth_residual(prev: PointEval, new: PointEval,
                           info: StepInfo, order_L: float) -> float:
    """Relative residual of d(rho^2)/dt == 2 L nu across one step.

    Both sides carry a factor exp(-x0) which cancels: the left side is
    delta_rho_sq / dt_scaled, the right the trapezoid of 2 L V e^{x0-x}.
    """
    lhs = info.delta_rho_sq / info.dt_scaled
    rhs = order_L * (prev.V + math.exp(prev.x - new.x) * new.V)
    if rhs == 0.0:
        return math.inf
    return abs(lhs - rhs) / abs(rhs)


def margin_rate_slack(prev: PointEval, new: PointEval, info: StepInfo,
                      spec: LossSpec, order_L: float) -> float:
    """d log(tilde margin) minus its certified lower bound, per step.

    The bound integrates L (d log rho/dt)^{-1} ||d theta_hat/dt||^2 by
    the trapezoid rule, which telescopes to L ||delta theta_hat||^2 /
    delta log rho over the step.
    """
    d_log_tilde = (log_tilde_margin(new, spec, order_L)
                   - log_tilde_margin(prev, spec, order_L))
    d_log_rho = math.log(new.rho) - math.log(prev.rho)
    if info.delta_theta_hat == 0.0:
        return d_log_tilde
    if d_log_rho <= 0.0:
        return math.inf  # rho must grow once separated; flagged upstream
    return d_log_tilde - order_L * info.delta_theta_hat**2 / d_log_rho


class LossUpperBound:
    """Accumulates log G(1/loss) for the certified time bound.

    G(z) = int_{1/loss(t0)}^{z} g'(log u)^2 / g(log u)^{2-2/L} du,
    integrated in v = log u coordinates where the integrand is
    exp(v + 2 log g'(v) - (2 - 2/L) log g(v)). The running value is
    kept in log space because G grows like 1/loss itself.
    """

    def __init__(self, spec: LossSpec, order_L: float, x0: float,
                 log_tilde0: float, t0: float):
        self.spec = spec
        self.order_L = order_L
        self.x_last = x0
        self.log_G = -math.inf
        self.t0 = t0
        self.log_rhs_scale = (2.0 * math.log(order_L)
                              + (2.0 / order_L) * log_tilde0)

    def _log_integrand(self, v: np.ndarray) -> np.ndarray:
        return (v + 2.0 * np.log(self.spec.g_prime(v))
                - (2.0 - 2.0 / self.order_L) * np.log(self.spec.g(v)))

    def update(self, x_new: float, subdiv: int = 8) -> float:
        if x_new <= self.x_last:
            return self.log_G
        v = np.linspace(self.x_last, x_new, subdiv + 1)
        fv = self._log_integrand(v)
        h = (x_new - self.x_last) / subdiv
        weights = np.full(subdiv + 1, h)
        weights[0] = weights[-1] = h / 2.0
        seg = float(logsumexp(fv, b=weights))
        self.log_G = float(np.logaddexp(self.log_G, seg))
        self.x_last = x_new
        return self.log_G

    def slack(self, t: float) -> float:
        """log G(1/loss(t)) - log(L^2 tilde0^{2/L} (t - t0)); >= 0 expected."""
        if t <= self.t0:
            return math.inf
        return self.log_G - self.log_rhs_scale - math.log(t - self.t0)


def run_flow(model: HomogeneousModel, theta0, dataset: Dataset, spec: LossSpec,
             *, target_log_inv_loss: float, step_tol: float = 1e-4,
             max_steps: int = 200_000, record_every: int = 1) -> dict:
    """Drive the flow until x reaches the target; collect per-step series.

    Returns a dict with the final state, per-step monitor series
    (activated after separation), and trajectory records suitable for
    serialization.
    """
    state = init_flow(model, theta0, dataset, spec)
    dt_scaled = propose_dt_scaled(state.ev, step_tol)
    records = []
    monitors = {
        "growth_residual": [],
        "margin_slack": [],
        "nu_slack": [],
        "beta": [],
        "d_log_tilde": [],
        "log_tilde": [],
        "upper_slack": [],
    }
    bound = None
    t_sep = None

    def record(st: FlowState):
        rec = {
            "t": st.t,
            "step": st.steps,
            "log_inv_loss": st.ev.x,
            "rho": st.ev.rho,
            "q_min": float(np.min(st.ev.q)),
            "beta": st.ev.beta,
            "nu_rel": st.ev.V,
        }
        if t_sep is not None:
            rec["log_tilde"] = log_tilde_margin(st.ev, spec, model.order_L)
            rec["bar_gamma"] = rec["q_min"] / st.ev.rho**model.order_L
        records.append(rec)

    if is_separated(state.ev, spec):
        t_sep = state.t
        bound = LossUpperBound(
            spec, model.order_L, state.ev.x,
            log_tilde_margin(state.ev, spec, model.order_L), state.t,
        )
    record(state)
    while state.ev.x < target_log_inv_loss and state.steps < max_steps:
        prev = state.ev
        state, info = flow_step(model, dataset, spec, state, dt_scaled,
                                step_tol=step_tol)
        if info.dt_scaled == 0.0:
            break  # exactly stationary
        dt_scaled = info.next_dt_scaled
        if t_sep is None and is_separated(state.ev, spec):
            t_sep = state.t
            bound = LossUpperBound(
                spec, model.order_L, state.ev.x,
                log_tilde_margin(state.ev, spec, model.order_L), state.t,
            )
        elif t_sep is not None and is_separated(prev, spec):
            monitors["growth_residual"].append(
                weight_growth_residual(prev, state.ev, info, model.order_L))
            monitors["margin_slack"].append(
                margin_rate_slack(prev, state.ev, info, spec, model.order_L))
            monitors["nu_slack"].append(nu_lower_slack(state.ev, spec))
            monitors["beta"].append(state.ev.beta)
            lt = log_tilde_margin(state.ev, spec, model.order_L)
            monitors["log_tilde"].append(lt)
            monitors["d_log_tilde"].append(
                lt - log_tilde_margin(prev, spec, model.order_L))
            if bound is not None and math.isfinite(state.t):
                bound.update(state.ev.x)
                monitors["upper_slack"].append(bound.slack(state.t))
        if state.steps % record_every == 0:
            record(state)
    if records[-1]["step"] != state.steps:
        record(state)
    return {
        "state": state,
        "records": records,
        "monitors": monitors,
        "t_sep": t_sep,
    }


# Mexican hat: a smooth order-L model rho^L (1 - f(r, phi)) whose flow
# direction circles forever. The planar hat flow preserves the spiral
# phase psi = phi - 1/(1 - r^2); integration uses time rescaled by the
# positive factor N e^{-h} rho^{L-2} s(r) (direction trajectories are
# invariant under positive rescaling), since both the loss prefactor
# and the envelope s(r) = exp(-1/(1-r^2)) collapse by hundreds of
# orders along the run.
#
# State is carried in (r, psi) rather than (r, phi): the psi equation
# collapses algebraically to
#     dpsi/dsigma = -(4r^2/eps^4) (1 - cos psi) + sin(psi) D(r),
# which vanishes identically at psi = 0.0 in floating point. Raw polar
# coordinates destroy the invariant: psi = 0 is a difference of two
# large terms whose perturbations grow like exp(4 sigma / eps^4) once
# r > 0.62, so roundoff alone swamps the phase before r reaches 0.9.

@dataclass(frozen=True)
class HatState:
    sigma: float  # rescaled flow time
    t: float  # physical time; overflows to inf once the margin > ~700
    r: float
    psi: float  # spiral phase phi - 1/(1 - r^2)
    log_rho: float
    clamped: bool = False

    @property
    def phi(self) -> float:
        return self.psi + 1.0 / (1.0 - self.r**2)

    @property
    def rho(self) -> float:
        return math.exp(self.log_rho) if self.log_rho < 709.0 else math.inf


def hat_envelope(r: float) -> tuple[float, float, float]:
    """C(r), C'(r), and 1 - C(r) of the hat's angular modulation.

    1 - C is returned separately as b/(a+b); the subtraction 1.0 - C
    cancels catastrophically once r > 0.95.
    """
    a = 4.0 * r**4
    b = (1.0 - r**2) ** 4
    c = a / (a + b)
    cp = 16.0 * r**3 * (1.0 - r**2) ** 3 * (1.0 + r**2) / (a + b) ** 2
    return c, cp, b / (a + b)


def hat_value(r: float, psi: float) -> float:
    """The bump s(r) times the angular modulation 1 - C sin(psi)."""
    if r >= 1.0:
        return 0.0
    c, _, _ = hat_envelope(r)
    return math.exp(-1.0 / (1.0 - r**2)) * (1.0 - c * math.sin(psi))


def _hat_rhs(r: float, psi: float, order_L: float,
             metric: str) -> tuple[float, float, float]:
    """(dr, dpsi, dlogrho)/dsigma for the rescaled hat flow."""
    eps = 1.0 - r * r
    slope = 2.0 * r / eps**2  # d(1/eps)/dr
    c, cp, one_minus_c = hat_envelope(r)
    sn = math.sin(psi)
    vers = 2.0 * math.sin(psi / 2.0) ** 2  # 1 - cos(psi), exact at 0.0
    cs = 1.0 - vers
    # -f_r/s grouped so psi = 0 leaves the pure radial drift slope*(1-C)
    dr = slope * (one_minus_c + c * vers - c * sn) + cp * sn
    if metric == "spherical":
        # direction flow on the sphere scales the radial leg by eps;
        # the phase is then genuinely not conserved
        dr *= eps
        dpsi = c * cs / (r * r) - slope * dr
    elif metric == "planar":
        dpsi = -slope * slope * c * vers + sn * (
            slope * slope * c - slope * cp)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    one_minus_f = 1.0 - math.exp(-1.0 / eps) * (1.0 - c * sn)
    dlogrho = order_L * one_minus_f * math.exp(min(1.0 / eps, 700.0))
    return dr, dpsi, dlogrho


def hat_step(state: HatState, dsigma: float, order_L: float = 2.0,
             n_samples: int = 1, metric: str = "planar") -> HatState:
    """One RK4 step in rescaled time; clamps and flags if r exits (0,1)."""
    y0 = np.array([state.r, state.psi, state.log_rho])

    def rhs(y):
        return np.array(_hat_rhs(float(y[0]), float(y[1]), order_L, metric))

    with np.errstate(over="ignore"):  # oversized steps clamp, not raise
        k1 = rhs(y0)
        k2 = rhs(y0 + (dsigma / 2) * k1)
        k3 = rhs(y0 + (dsigma / 2) * k2)
        k4 = rhs(y0 + dsigma * k3)
        y1 = y0 + (dsigma / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    r1, psi1, log_rho1 = float(y1[0]), float(y1[1]), float(y1[2])
    clamped = False
    if not 0.0 < r1 < 1.0:
        r1 = min(max(r1, 1e-12), 1.0 - 1e-12)
        clamped = True
    # physical dt/dsigma = e^{h}/(N rho^{L-2} s); overflows by design
    h0 = math.exp(min(state.log_rho * order_L, 700.0)) * (
        1.0 - hat_value(state.r, state.psi))
    log_rate = (h0 - math.log(n_samples)
                - (order_L - 2.0) * state.log_rho
                + 1.0 / (1.0 - state.r**2))
    t1 = state.t + dsigma * math.exp(log_rate) if log_rate < 700.0 else math.inf
    return HatState(sigma=state.sigma + dsigma, t=t1, r=r1, psi=psi1,
                    log_rho=log_rho1, clamped=clamped or state.clamped)


def run_hat(*, order_L: float = 2.0, n_samples: int = 1, r0: float = 0.5,
            psi0: float = 0.0, rho0: float = 1.0, r_stop: float = 0.992,
            dphi_target: float = 0.015, max_steps: int = 100_000,
            record_every: int = 10, metric: str = "planar") -> list[dict]:
    """Integrate from psi(0)=psi0 until r reaches r_stop; emit records."""
    state = HatState(sigma=0.0, t=0.0, r=r0, psi=psi0,
                     log_rho=math.log(rho0))
    records = []

    def push(st: HatState):
        log10_h = (order_L * st.log_rho
                   + math.log1p(-hat_value(st.r, st.psi))) / math.log(10.0)
        records.append({
            "sigma": st.sigma, "t": st.t, "r": st.r, "phi": st.phi,
            "psi": st.psi, "rho": st.rho, "log_rho": st.log_rho,
            "log10_h": log10_h, "clamped": st.clamped,
        })

    push(state)
    for step in range(1, max_steps + 1):
        dr, dpsi, _ = _hat_rhs(state.r, state.psi, order_L, metric)
        slope = 2.0 * state.r / (1.0 - state.r**2) ** 2
        dphi = dpsi + slope * dr
        dsigma = dphi_target / max(abs(dphi), 1e-12)
        if abs(dr) > 0.0:
            dsigma = min(dsigma, 0.002 / abs(dr))
        state = hat_step(state, dsigma, order_L, n_samples, metric)
        if step % record_every == 0 or state.r >= r_stop:
            push(state)
        if state.r >= r_stop:
            break
    return records
