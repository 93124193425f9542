"""Ornstein-Uhlenbeck temporal process on irregular time grids.

The process is stationary with precision ``tau_s`` and mean-reversion rate
``phi`` (1/seconds). Given the previous state ``s_prev`` observed ``dt``
seconds earlier the next state is Gaussian with mean ``s_prev * exp(-phi*dt)``
and precision ``tau_s / (1 - exp(-2*phi*dt))``; the first state of a path is
``Normal(0, 1/tau_s)``.

The joint precision of a path is tridiagonal. It is represented here in the
two-array form ``(diag, off)`` where ``off[k]`` couples states ``k`` and
``k+1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class OuParams:
    phi: float
    tau_s: float

    def __post_init__(self):
        if not (self.phi > 0 and np.isfinite(self.phi)):
            raise ValueError(f"phi must be positive and finite, got {self.phi}")
        if not (self.tau_s > 0 and np.isfinite(self.tau_s)):
            raise ValueError(f"tau_s must be positive and finite, got {self.tau_s}")


@dataclass(frozen=True)
class OuPath:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        _check_times(times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)


def _check_times(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a non-empty 1-d array")
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        bad = int(np.flatnonzero(np.diff(times) <= 0)[0]) + 1
        raise ValueError(f"times must be strictly increasing (violated at index {bad})")
    return times


def _decay(dt, phi):
    """Return ``exp(-phi*dt)`` and ``1 - exp(-2*phi*dt)`` computed without cancellation."""
    rho = np.exp(-phi * dt)
    one_minus_rho2 = -np.expm1(-2.0 * phi * dt)
    return rho, one_minus_rho2


def ou_conditional(s_prev, dt, p: OuParams):
    """Mean and precision of the next state given the previous one.

    Parameters
    ----------
    s_prev : float or ndarray
        Previous state value(s).
    dt : float or ndarray
        Positive elapsed time(s) in seconds.
    p : OuParams

    Returns
    -------
    mean, precision : float or ndarray
    """
    dt = np.asarray(dt, dtype=float)
    if np.any(~(dt > 0)):
        raise ValueError("dt must be strictly positive")
    rho, one_minus_rho2 = _decay(dt, p.phi)
    mean = np.asarray(s_prev, dtype=float) * rho
    precision = p.tau_s / one_minus_rho2
    if mean.ndim == 0 and precision.ndim == 0:
        return float(mean), float(precision)
    return mean, precision


def ou_precision_bands(times, p: OuParams):
    """Tridiagonal precision of a path in ``(diag, off)`` form.

    Built from the sequential factorisation: with ``rho_k = exp(-phi*dt_k)``
    and conditional precision ``c_k = tau_s / (1 - rho_k**2)``,
    ``Q = sum_k c_k (e_{k+1} - rho_k e_k)(e_{k+1} - rho_k e_k)^T + tau_s e_0 e_0^T``.
    """
    times = _check_times(times)
    n = times.size
    diag = np.empty(n)
    diag[0] = p.tau_s
    if n == 1:
        return diag, np.empty(0)
    rho, one_minus_rho2 = _decay(np.diff(times), p.phi)
    cond = p.tau_s / one_minus_rho2
    diag[1:] = cond
    diag[:-1] += cond * rho * rho
    off = -cond * rho
    return diag, off


def ou_precision(times, p: OuParams):
    """Joint precision matrix of the path at ``times`` (sparse, tridiagonal)."""
    diag, off = ou_precision_bands(times, p)
    return sparse.diags([off, diag, off], [-1, 0, 1], format="csr")


def ou_logdet(times, p: OuParams):
    """Log-determinant of :func:`ou_precision`, i.e. the sum of log conditional precisions."""
    times = _check_times(times)
    out = np.log(p.tau_s)
    if times.size > 1:
        _, one_minus_rho2 = _decay(np.diff(times), p.phi)
        out += np.sum(np.log(p.tau_s) - np.log(one_minus_rho2))
    return float(out)


def ou_logpdf(path: OuPath, p: OuParams):
    """Log-density of a path: initial state plus sequential conditionals."""
    x = path.values
    out = 0.5 * (np.log(p.tau_s) - LOG_2PI - p.tau_s * x[0] ** 2)
    if x.size > 1:
        mean, prec = ou_conditional(x[:-1], np.diff(path.times), p)
        out += 0.5 * np.sum(np.log(prec) - LOG_2PI - prec * (x[1:] - mean) ** 2)
    return float(out)


def ou_sample(times, p: OuParams, seed=None, size=None):
    """Draw path(s) sequentially from the exact conditionals.

    With ``size=None`` an :class:`OuPath` is returned; otherwise an array of
    shape ``(size, len(times))``.
    """
    times = _check_times(times)
    rng = np.random.default_rng(seed)
    m = 1 if size is None else int(size)
    z = rng.standard_normal((m, times.size))
    out = np.empty_like(z)
    out[:, 0] = z[:, 0] / np.sqrt(p.tau_s)
    if times.size > 1:
        rho, one_minus_rho2 = _decay(np.diff(times), p.phi)
        sd = np.sqrt(one_minus_rho2 / p.tau_s)
        for k in range(1, times.size):
            out[:, k] = rho[k - 1] * out[:, k - 1] + sd[k - 1] * z[:, k]
    if size is None:
        return OuPath(times, out[0])
    return out


def ou_kernel(times, p: OuParams):
    """Dense stationary covariance ``exp(-phi|t_i - t_j|) / tau_s``."""
    t = np.asarray(times, dtype=float)
    return np.exp(-p.phi * np.abs(t[:, None] - t[None, :])) / p.tau_s
