"""Bounded-ratio diagnostics for the asymptotic loss and norm rates.

The predicted tail rates are loss ~ g(log T)^{2/L} / (T (log T)^2) and
norm ~ g(log T)^{1/L}, with T physical time for the flow and the
accumulated step-size sum for discrete descent. Hidden constants make
curve fitting pointless; what is testable is that the ratio of the
measured quantity to the predicted shape stays within a bounded factor
over the trailing decades of T. Everything is computed in log space:
late-time runs put both 1/loss and T far beyond float range while the
ratios themselves stay O(1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import LossSpec

LOG10 = math.log(10.0)


@dataclass(frozen=True)
class RateDiagnostic:
    """Ratio series against the predicted shapes, on a log10 T axis.

    T itself is kept for plotting but may overflow to inf on long
    descent runs; log10_T is the authoritative axis. decades measures
    the span past the burn-in cut; runs under three decades are marked
    inconclusive and should not be judged.
    """

    T: np.ndarray
    log10_T: np.ndarray
    ratio_loss: np.ndarray
    ratio_rho: np.ndarray
    log_ratio_loss: np.ndarray
    log_ratio_rho: np.ndarray
    decades: float
    inconclusive: bool


@dataclass(frozen=True)
class RateVerdict:
    passed: bool
    inconclusive: bool
    factor_loss: float
    factor_rho: float
    window: float
    bound_factor: float


def _log_T_of(rec) -> float:
    if "t" in rec:
        t = rec["t"]
        if not (t > 0.0 and math.isfinite(t)):
            return math.nan
        return math.log(t)
    if "log_sum_eta" in rec:
        return rec["log_sum_eta"]
    raise ValueError("trajectory records carry neither t nor log_sum_eta")


def rate_ratios(trajectory, spec: LossSpec, order_L: float,
                n_samples: int) -> RateDiagnostic:
    """Measured-over-predicted ratio series for one trajectory.

    Records before the burn-in cut are dropped: the cut is the first
    time log(1/loss) reaches 2 log N, past which every sample is
    individually well classified and the tail theory applies. The
    remaining span must cover three decades of T to be conclusive.
    """
    log_T = np.array([_log_T_of(rec) for rec in trajectory])
    x = np.array([rec["log_inv_loss"] for rec in trajectory])
    rho = np.array([rec["rho"] for rec in trajectory])
    threshold = 2.0 * math.log(n_samples)
    keep = (np.isfinite(log_T) & (x >= threshold)
            & (log_T > spec.f_at_bf + 1e-9))
    log_T, x, rho = log_T[keep], x[keep], rho[keep]
    g = np.asarray(spec.g(log_T), dtype=np.float64)
    pos = g > 0.0
    log_T, x, rho, g = log_T[pos], x[pos], rho[pos], g[pos]
    log_ratio_loss = (-x + log_T + 2.0 * np.log(log_T)
                      - (2.0 / order_L) * np.log(g))
    log_ratio_rho = np.log(rho) - np.log(g) / order_L
    decades = (log_T[-1] - log_T[0]) / LOG10 if log_T.size >= 2 else 0.0
    # off-regime runs (steps far beyond the certified window) can push
    # the ratios out of float range; inf is the honest value there
    with np.errstate(over="ignore"):
        T = np.exp(log_T)
        ratio_loss = np.exp(log_ratio_loss)
        ratio_rho = np.exp(log_ratio_rho)
    return RateDiagnostic(
        T=T, log10_T=log_T / LOG10,
        ratio_loss=ratio_loss, ratio_rho=ratio_rho,
        log_ratio_loss=log_ratio_loss, log_ratio_rho=log_ratio_rho,
        decades=decades, inconclusive=decades < 3.0,
    )


def bounded_ratio_verdict(diag: RateDiagnostic, window: float = 2.0,
                          bound_factor: float = 10.0) -> RateVerdict:
    """Pass iff both ratio series vary by at most bound_factor over the
    final `window` decades of T. An inconclusive diagnostic (or a
    window wider than its span) never passes."""
    if diag.inconclusive or window > diag.decades:
        return RateVerdict(passed=False, inconclusive=True,
                           factor_loss=math.nan, factor_rho=math.nan,
                           window=window, bound_factor=bound_factor)
    tail = diag.log10_T >= diag.log10_T[-1] - window

    def spread(log_series):
        width = float(np.max(log_series) - np.min(log_series))
        return math.inf if width > 700.0 else math.exp(width)

    factor_loss = spread(diag.log_ratio_loss[tail])
    factor_rho = spread(diag.log_ratio_rho[tail])
    return RateVerdict(
        passed=factor_loss <= bound_factor and factor_rho <= bound_factor,
        inconclusive=False, factor_loss=factor_loss, factor_rho=factor_rho,
        window=window, bound_factor=bound_factor,
    )
