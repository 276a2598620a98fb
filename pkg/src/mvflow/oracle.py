"""Closed-form pathwise references for the 1-D interacting example

    dX = (f(X) - E X) dt + (X - E X) dW,

whose Jacobian solves dJ = (f'(X) J - E J) dt + (J - E J) dW. With
Z_t = exp(int f'(X) dr - (t - s)/2 + W_t - W_s), variation of constants
gives

    J*_t = Z_t (1 - int_s^t Z_r^{-1} E[J_r] dW_r),

and J* turns non-positive exactly when the running integral reaches 1.
All stochastic integrals are left-point (Itô) sums on the knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


def _check_series(times: np.ndarray, *series: np.ndarray) -> None:
    for a in series:
        if a is not None and a.shape[-1] != times.shape[-1]:
            raise ConfigurationError(f"series of length {a.shape[-1]} does not match {times.shape[-1]} knots")


def _along(value, shape) -> np.ndarray:
    """Broadcast a scalar or per-knot series to ``shape``."""
    try:
        return np.broadcast_to(np.asarray(value, dtype=float), shape)
    except ValueError as exc:
        raise ConfigurationError(f"series of shape {np.shape(value)} does not match knots {shape}") from exc


def ito_integral(integrand: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Running left-point sums of int integrand dW; last axis is time."""
    dW = np.diff(W, axis=-1)
    out = np.zeros(np.broadcast_shapes(np.shape(integrand), np.shape(W)))
    np.cumsum(integrand[..., :-1] * dW, axis=-1, out=out[..., 1:])
    return out


def _time_integral(integrand: np.ndarray, times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    out = np.zeros(np.shape(integrand))
    np.cumsum(integrand[..., :-1] * dt, axis=-1, out=out[..., 1:])
    return out


def stochastic_exponential(g, W: np.ndarray, times: np.ndarray) -> np.ndarray:
    """exp(int g dW - 1/2 int g^2 dr) with left-point sums; always positive."""
    W = np.asarray(W, dtype=float)
    times = np.asarray(times, dtype=float)
    g = _along(g, W.shape)
    _check_series(times, W, g)
    return np.exp(ito_integral(g, W) - 0.5 * _time_integral(g * g, times))


def closed_form_jacobian(W, fprime, mean_J, times) -> np.ndarray:
    """J*_t from the pathwise variation-of-constants formula.

    ``W``, ``fprime`` (f' along the simulated state) and ``mean_J`` share
    the knot axis (last). For f = id pass ``fprime = 1`` and ``mean_J = 1``.
    """
    W = np.asarray(W, dtype=float)
    times = np.asarray(times, dtype=float)
    fprime = _along(fprime, W.shape)
    mean_J = _along(mean_J, W.shape)
    _check_series(times, W, fprime, mean_J)
    log_z = _time_integral(fprime, times) - 0.5 * (times - times[0]) + (W - W[..., :1])
    return np.exp(log_z) * (1.0 - ito_integral(np.exp(-log_z) * mean_J, W))


def first_crossing(series, threshold) -> int | None:
    """First knot where ``threshold <= series``; None when never."""
    hit = np.flatnonzero(np.asarray(threshold) <= np.asarray(series))
    return int(hit[0]) if hit.size else None


def crossing_series(W, times, fprime=None, mean_J=None):
    """The running integral f_s(t) and its threshold, normalised so the
    crossing happens when the integral reaches 1."""
    W = np.asarray(W, dtype=float)
    times = np.asarray(times, dtype=float)
    fprime = _along(1.0 if fprime is None else fprime, W.shape)
    mean_J = _along(1.0 if mean_J is None else mean_J, W.shape)
    _check_series(times, W, fprime, mean_J)
    log_z = _time_integral(fprime, times) - 0.5 * (times - times[0]) + (W - W[..., :1])
    return ito_integral(np.exp(-log_z) * mean_J, W), 1.0


def crossing_time(W, times, s_index: int = 0, fprime=None, mean_J=None) -> int | None:
    """First knot t >= s where the closed-form Jacobian stops being positive.

    For f = id this is the first t with exp(-s/2 - W_s) <= int_s^t
    exp(-r/2 - W_r) dW_r. The result is a knot index on the full grid.
    """
    W = np.asarray(W, dtype=float)

    def tail(a):
        return None if a is None else _along(a, W.shape)[s_index:]

    f_s, threshold = crossing_series(W[s_index:], np.asarray(times, float)[s_index:], tail(fprime), tail(mean_J))
    hit = first_crossing(f_s, threshold)
    return None if hit is None else hit + s_index


@dataclass
class OraclePath:
    """Closed-form references on one Brownian path (f = id unless given)."""

    times: np.ndarray
    W: np.ndarray
    f_s: np.ndarray
    J_star: np.ndarray
    rho: int | None

    @classmethod
    def build(cls, W, times, fprime=None, mean_J=None) -> OraclePath:
        W = np.asarray(W, dtype=float)
        times = np.asarray(times, dtype=float)
        fp = 1.0 if fprime is None else fprime
        mj = 1.0 if mean_J is None else mean_J
        f_s, threshold = crossing_series(W, times, fprime, mean_J)
        return cls(times, W, f_s, closed_form_jacobian(W, fp, mj, times), first_crossing(f_s, threshold))


def fit_order(steps, errors) -> tuple[float, float]:
    """Least-squares slope of log2(error) on log2(step), with its standard error.

    Returns ``(inf, 0)`` when every error is zero.
    """
    h = np.log2(np.asarray(steps, dtype=float))
    e = np.asarray(errors, dtype=float)
    if np.all(e == 0):
        return float("inf"), 0.0
    y = np.log2(np.maximum(e, np.finfo(float).tiny))
    A = np.stack([h, np.ones_like(h)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = len(h)
    if n > 2:
        resid = y - A @ coef
        s2 = float(resid @ resid) / (n - 2)
        cov = s2 * np.linalg.inv(A.T @ A)
        se = float(np.sqrt(cov[0, 0]))
    else:
        se = float("nan")
    return float(coef[0]), se
