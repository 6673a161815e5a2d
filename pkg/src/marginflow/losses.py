"""Exponential-tail loss families: ell(q) = exp(-f(q)) with inverse g.

Each family carries the pair (f, g) plus the tail constants (K, b_g, p)
used by the discrete-time margin machinery. Trajectories reach losses
around 1e-800, so every function of the loss has a log-domain entry
point taking x = log(1/loss) directly; the loss value itself is never
required once it would underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize


class LossDomainError(ValueError):
    """Evaluation outside the monotone domain, e.g. loss above ell(b_f)."""


def _as_f64(q):
    return np.asarray(q, dtype=np.float64)


@dataclass(frozen=True)
class LossSpec:
    """One loss family; immutable and freely shareable across workers.

    f and f_prime are defined on all of R; g and g_prime only on
    [f(b_f), inf), the range where f is invertible. K, b_g, p are the
    tail-comparability constants; None when not established.
    """

    name: str
    f: Callable
    f_prime: Callable
    g: Callable
    g_prime: Callable
    b_f: float
    K: float | None = None
    b_g: float | None = None
    p: float | None = None

    @property
    def f_at_bf(self) -> float:
        return float(self.f(self.b_f))

    @property
    def separability_threshold(self) -> float:
        """Loss value ell(b_f); total loss below it forces all q_n > b_f."""
        return float(np.exp(-self.f_at_bf))

    def ell(self, q):
        return np.exp(-self.f(q))

    def ell_inv(self, v):
        """Inverse of ell on (0, ell(b_f)]: returns q with ell(q) = v."""
        v = _as_f64(v)
        return self.g(-np.log(v))

    def check_g_domain(self, x, slack: float = 1e-9):
        x = _as_f64(x)
        if np.any(x < self.f_at_bf - slack):
            raise LossDomainError(
                f"{self.name}: g evaluated at {np.min(x)} below f(b_f) = "
                f"{self.f_at_bf}; separability not yet met"
            )


def lambda_from_log_inv_loss(spec: LossSpec, log_inv_loss) -> np.ndarray:
    """lambda(x) = g'(x)/g(x) with x = log(1/loss), log-domain entry."""
    x = _as_f64(log_inv_loss)
    if np.any(x <= spec.f_at_bf):
        raise LossDomainError(
            f"{spec.name}: lambda needs log(1/loss) > f(b_f) = {spec.f_at_bf}"
        )
    return spec.g_prime(x) / spec.g(x)


def lambda_of_loss(spec: LossSpec, loss_value: float) -> float:
    """lambda(loss) = g'(log 1/loss)/g(log 1/loss); needs loss < ell(b_f)."""
    if not 0.0 < loss_value < spec.separability_threshold:
        raise LossDomainError(
            f"{spec.name}: loss {loss_value} not below separability "
            f"threshold {spec.separability_threshold}"
        )
    return float(lambda_from_log_inv_loss(spec, -np.log(loss_value)))


# exponential loss: f = g = identity

def make_exponential() -> LossSpec:
    ident = lambda q: _as_f64(q) + 0.0
    ones = lambda q: np.ones_like(_as_f64(q))
    return LossSpec(
        name="exp",
        f=ident,
        f_prime=ones,
        g=ident,
        g_prime=ones,
        b_f=0.0,
        K=1.0,
        b_g=0.0,
        p=0.0,
    )


# logistic loss: ell(q) = log(1 + e^{-q})

def _logistic_softplus_neg(q):
    """softplus(-q) = log(1 + e^{-q}), stable on all of R."""
    q = _as_f64(q)
    u = np.exp(-np.abs(q))
    return np.where(q >= 0.0, np.log1p(u), -q + np.log1p(u))


def _logistic_f(q):
    q = _as_f64(q)
    sp = _logistic_softplus_neg(q)
    safe = sp > 0.0  # softplus(-q) underflows past q ~ 745 where f(q) = q
    return np.where(safe, -np.log(np.where(safe, sp, 1.0)), q)


def _logistic_f_prime(q):
    # f' = sigmoid(-q)/softplus(-q); both factors underflow together for
    # q > ~745 where the ratio tends to 1
    q = _as_f64(q)
    u = np.exp(-np.abs(q))
    sp = np.where(q >= 0.0, np.log1p(u), -q + np.log1p(u))
    sig = np.where(q >= 0.0, u / (1.0 + u), 1.0 / (1.0 + u))
    safe = sp > 0.0
    return np.where(safe, sig / np.where(safe, sp, 1.0), 1.0)


_LOGISTIC_F_AT_BF = float(-np.log(np.log(2.0)))


def _logistic_g(x):
    """g(x) = -log(e^{e^{-x}} - 1) on [-log log 2, inf)."""
    x = _as_f64(x)
    u = np.exp(-np.minimum(x, 745.0))
    tail = x > 30.0
    # tail: -log(expm1(u)) = x - log1p(u/2 + u^2/6 + u^3/24)
    series = x - np.log1p(u * (0.5 + u * (1.0 / 6.0 + u / 24.0)))
    direct = -np.log(np.expm1(np.where(tail, 1.0, u)))
    return np.where(tail, series, direct)


def _logistic_g_prime(x):
    """g'(x) = u e^u / (e^u - 1) with u = e^{-x}; decreasing, limit 1."""
    x = _as_f64(x)
    u = np.exp(-np.minimum(x, 745.0))
    tail = x > 30.0
    series = np.exp(u) / (1.0 + u * (0.5 + u * (1.0 / 6.0 + u / 24.0)))
    direct = u * np.exp(u) / np.expm1(np.where(tail, 1.0, u))
    return np.where(tail, series, direct)


def _with_domain_check(fn, f_at_bf, name):
    def checked(x):
        x = _as_f64(x)
        if np.any(x < f_at_bf - 1e-9):
            raise LossDomainError(
                f"{name}: argument {np.min(x)} below f(b_f) = {f_at_bf}"
            )
        return fn(x)

    return checked


def make_logistic(name: str = "logistic") -> LossSpec:
    return LossSpec(
        name=name,
        f=_logistic_f,
        f_prime=_logistic_f_prime,
        g=_with_domain_check(_logistic_g, _LOGISTIC_F_AT_BF, name),
        g_prime=_with_domain_check(_logistic_g_prime, _LOGISTIC_F_AT_BF, name),
        b_f=0.0,
        K=2.0,
        b_g=2.0,
        p=1.0,
    )


# cubed-exponent loss: ell(q) = e^{-q^3}; in-family with b_f = 0.
# Tail constants are analytic here: f'(y)/f'(ty) = t^{-2} <= 4 for
# t in [1/2, 1), and g' is decreasing so its clause holds with K = 1;
# hence K = 4 = 2^2, p = 2, and any b_g > 0 works (we fix 1).

def make_exp_cubed() -> LossSpec:
    f = lambda q: _as_f64(q) ** 3
    f_prime = lambda q: 3.0 * _as_f64(q) ** 2

    def g(x):
        return np.cbrt(np.maximum(_as_f64(x), 0.0))

    def g_prime(x):
        x = np.maximum(_as_f64(x), 0.0)
        with np.errstate(divide="ignore"):
            return 1.0 / (3.0 * np.cbrt(x) ** 2)

    return LossSpec(
        name="exp_cubed",
        f=f,
        f_prime=f_prime,
        g=_with_domain_check(g, 0.0, "exp_cubed"),
        g_prime=_with_domain_check(g_prime, 0.0, "exp_cubed"),
        b_f=0.0,
        K=4.0,
        b_g=1.0,
        p=2.0,
    )


def make_custom(name: str, f: Callable, f_prime: Callable, b_f: float = 0.0,
                K: float | None = None, b_g: float | None = None,
                p: float | None = None) -> LossSpec:
    """Wrap a user (f, f') pair; g is obtained by bracketed root finding.

    Bisection tolerance 1e-12 relative. g' comes from the inverse rule
    g'(x) = 1/f'(g(x)).
    """
    f_at_bf = float(f(b_f))

    def g_scalar(x: float) -> float:
        if x <= f_at_bf:
            return float(b_f)
        hi = max(b_f + 1.0, 1.0)
        while f(hi) < x:
            hi *= 2.0
            if hi > 1e300:
                raise LossDomainError(f"{name}: g({x}) bracket expansion failed")
        return float(
            optimize.brentq(lambda q: f(q) - x, b_f, hi, rtol=1e-12, maxiter=200)
        )

    def g(x):
        x = _as_f64(x)
        if np.any(x < f_at_bf - 1e-9):
            raise LossDomainError(f"{name}: g below f(b_f) = {f_at_bf}")
        return np.vectorize(g_scalar, otypes=[np.float64])(x) + 0.0

    def g_prime(x):
        return 1.0 / f_prime(g(x))

    return LossSpec(
        name=name, f=f, f_prime=f_prime, g=g, g_prime=g_prime,
        b_f=b_f, K=K, b_g=b_g, p=p,
    )


_REGISTRY = {
    "exp": make_exponential,
    "logistic": make_logistic,
    "cross_entropy": lambda: make_logistic("cross_entropy"),
    "exp_cubed": make_exp_cubed,
}


def get_loss(name: str) -> LossSpec:
    if name not in _REGISTRY:
        raise ValueError(f"unknown loss {name!r}; have {sorted(_REGISTRY)}")
    return _REGISTRY[name]()


# assumption validators

@dataclass(frozen=True)
class ClauseResult:
    clause: str
    passed: bool
    worst: float
    where: tuple


@dataclass(frozen=True)
class B3Report:
    loss_name: str
    clauses: tuple[ClauseResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.clauses)

    def failures(self) -> list[ClauseResult]:
        return [c for c in self.clauses if not c.passed]


def default_grid(lo: float = 1e-3, hi: float = 1e3, n: int = 10_000) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def validate_b3(spec: LossSpec, grid: np.ndarray | None = None,
                divergence_bound: float = 100.0) -> B3Report:
    """Grid checks of the loss-family assumptions; failures are reported,
    never raised."""
    if grid is None:
        grid = default_grid()
    q = spec.b_f + np.asarray(grid, dtype=np.float64)
    clauses = []

    fp = spec.f_prime(q)
    i = int(np.argmin(fp))
    clauses.append(
        ClauseResult("f_prime_positive", bool(np.all(fp > 0.0)),
                     float(fp[i]), (float(q[i]),))
    )

    fq = fp * q
    diffs = np.diff(fq)
    # non-decreasing up to relative rounding slack
    tol = -1e-12 * np.maximum(np.abs(fq[:-1]), 1.0)
    j = int(np.argmin(diffs - tol))
    clauses.append(
        ClauseResult("fq_nondecreasing", bool(np.all(diffs >= tol)),
                     float(diffs[j]), (float(q[j]), float(q[j + 1])))
    )

    clauses.append(
        ClauseResult("fq_diverges", bool(fq[-1] > divergence_bound),
                     float(fq[-1]), (float(q[-1]),))
    )

    qr = np.linspace(spec.b_f + 0.1, 50.0, 500)
    back = spec.g(spec.f(qr))
    rel = np.abs(back - qr) / np.maximum(np.abs(qr), 1.0)
    k = int(np.argmax(rel))
    clauses.append(
        ClauseResult("g_roundtrip", bool(np.max(rel) <= 1e-10),
                     float(rel[k]), (float(qr[k]),))
    )

    if spec.K is not None and spec.b_g is not None:
        clauses.append(_check_b34(spec))

    return B3Report(loss_name=spec.name, clauses=tuple(clauses))


def _check_b34(spec: LossSpec) -> ClauseResult:
    """Tail comparability: g'(x) <= K g'(tx) and f'(y) <= K f'(ty) for
    t in [1/2, 1), x > b_g, y > g(b_g)."""
    xs = np.geomspace(max(spec.b_g, 1e-6) + 1e-9, 600.0, 200)
    ts = np.linspace(0.5, 0.999, 40)
    worst = -np.inf
    where = ()
    for t in ts:
        r1 = spec.g_prime(xs) / (spec.K * spec.g_prime(t * xs))
        ys = spec.g(xs)
        r2 = spec.f_prime(ys) / (spec.K * spec.f_prime(t * ys))
        r = np.maximum(r1, r2)
        i = int(np.argmax(r))
        if r[i] > worst:
            worst = float(r[i])
            where = (float(xs[i]), float(t))
    return ClauseResult("b34_tail_comparability", worst <= 1.0 + 1e-12, worst, where)
