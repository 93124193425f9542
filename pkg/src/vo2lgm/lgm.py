"""Latent Gaussian model assembly: latent layout, prior precision, design, hyperpriors.

The latent field is ordered ``[fixed effects | session intercept deviations |
patient log(vt) slope deviations | O-U states]``. Population means of the
session intercepts and patient slopes live among the fixed effects, so the
deviations are zero-mean and the prior precision is block diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from .dataset import ModelFrame
from .ou import OuParams, ou_logdet, ou_precision_bands

HYPER_NAMES = ("tau_alpha", "tau_beta1", "tau_s", "phi")


@dataclass(frozen=True)
class PriorSpec:
    """Priors of the model. ``obs_precision`` is a fixed constant, not a hyperparameter."""

    fixed_precision: float = 0.1
    tau_alpha_shape: float = 1.0
    tau_alpha_rate: float = 5e-5
    tau_beta1_shape: float = 1.0
    tau_beta1_rate: float = 5e-5
    tau_s_shape: float = 50.0
    tau_s_rate: float = 1.0
    log_phi_mean: float = 0.0
    log_phi_precision: float = 0.1
    obs_precision: float = float(np.exp(15.0))

    def __post_init__(self):
        for name, value in vars(self).items():
            if name == "log_phi_mean":
                continue
            if not (value > 0 and np.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class HyperParams:
    tau_alpha: float
    tau_beta1: float
    tau_s: float
    phi: float

    def __post_init__(self):
        for name in HYPER_NAMES:
            value = getattr(self, name)
            if not (value > 0 and np.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    def to_log(self):
        return np.log([self.tau_alpha, self.tau_beta1, self.tau_s, self.phi])

    @classmethod
    def from_log(cls, psi):
        psi = np.asarray(psi, dtype=float)
        return cls(*np.exp(psi).tolist())

    @property
    def ou(self):
        return OuParams(phi=self.phi, tau_s=self.tau_s)

    def as_dict(self):
        return {k: getattr(self, k) for k in HYPER_NAMES}


@dataclass(frozen=True)
class LatentLayout:
    terms: tuple
    n_sessions: int
    n_patients: int
    n_obs: int

    @property
    def n_fixed(self):
        return len(self.terms)

    @property
    def fixed(self):
        return slice(0, self.n_fixed)

    @property
    def sessions(self):
        a = self.n_fixed
        return slice(a, a + self.n_sessions)

    @property
    def patients(self):
        a = self.n_fixed + self.n_sessions
        return slice(a, a + self.n_patients)

    @property
    def ou(self):
        a = self.n_fixed + self.n_sessions + self.n_patients
        return slice(a, a + self.n_obs)

    @property
    def n_effects(self):
        """Size of the non-temporal block (fixed effects and both deviation sets)."""
        return self.n_fixed + self.n_sessions + self.n_patients

    @property
    def dim(self):
        return self.n_effects + self.n_obs


def layout(frame: ModelFrame) -> LatentLayout:
    if frame.n == 0:
        raise ValueError("frame is empty")
    return LatentLayout(
        terms=tuple(frame.terms),
        n_sessions=len(frame.session_ids),
        n_patients=len(frame.patient_ids),
        n_obs=frame.n,
    )


def session_times(frame: ModelFrame):
    """Per-session time grids in session index order."""
    return [frame.t[sl] for sl in frame.session_slices()]


def effects_prior_diag(lay: LatentLayout, theta: HyperParams, priors: PriorSpec):
    """Diagonal of the prior precision over the non-temporal block."""
    return np.concatenate(
        [
            np.full(lay.n_fixed, priors.fixed_precision),
            np.full(lay.n_sessions, theta.tau_alpha),
            np.full(lay.n_patients, theta.tau_beta1),
        ]
    )


def ou_bands(times_per_session, theta: HyperParams):
    """Concatenated tridiagonal O-U precision over all sessions.

    ``off`` has length ``n_obs - 1``; entries straddling a session boundary are zero.
    """
    diags, offs = [], []
    for k, times in enumerate(times_per_session):
        d, o = ou_precision_bands(times, theta.ou)
        diags.append(d)
        if k > 0:
            offs.append(np.zeros(1))
        offs.append(o)
    diag = np.concatenate(diags)
    off = np.concatenate(offs) if offs else np.empty(0)
    return diag, off


def prior_precision(lay: LatentLayout, theta: HyperParams, priors: PriorSpec, times_per_session):
    """Sparse joint prior precision ``Q(theta)`` of the latent field."""
    if sum(len(t) for t in times_per_session) != lay.n_obs:
        raise ValueError("time grids do not match the layout's observation count")
    eff = sparse.diags(effects_prior_diag(lay, theta, priors))
    diag, off = ou_bands(times_per_session, theta)
    q_ou = sparse.diags([off, diag, off], [-1, 0, 1])
    return sparse.block_diag([eff, q_ou], format="csr")


def prior_logdet(lay: LatentLayout, theta: HyperParams, priors: PriorSpec, times_per_session):
    out = lay.n_fixed * np.log(priors.fixed_precision)
    out += lay.n_sessions * np.log(theta.tau_alpha) + lay.n_patients * np.log(theta.tau_beta1)
    out += sum(ou_logdet(t, theta.ou) for t in times_per_session)
    return float(out)


def design_row(frame: ModelFrame, r: int, lay: LatentLayout):
    """Sparse 1 x dim row mapping the latent field to the linear predictor of row ``r``."""
    x = frame.X[r]
    cols = list(range(lay.n_fixed))
    vals = list(x)
    cols += [
        lay.sessions.start + int(frame.session_index[r]),
        lay.patients.start + int(frame.patient_index[r]),
        lay.ou.start + r,
    ]
    vals += [1.0, float(frame.log_vt[r]), 1.0]
    return sparse.csr_matrix((vals, ([0] * len(cols), cols)), shape=(1, lay.dim))


def design_matrix(frame: ModelFrame, lay: LatentLayout):
    """Sparse n x dim observation design ``A`` with ``eta = A @ x``."""
    n, p = frame.X.shape
    rows = np.repeat(np.arange(n), p + 3)
    cols = np.column_stack(
        [
            np.tile(np.arange(p), (n, 1)),
            lay.sessions.start + frame.session_index,
            lay.patients.start + frame.patient_index,
            lay.ou.start + np.arange(n),
        ]
    ).ravel()
    vals = np.column_stack([frame.X, np.ones(n), frame.log_vt, np.ones(n)]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, lay.dim))


def local_design(frame: ModelFrame):
    """Per-row dense design over ``[fixed effects, own session, own patient]``.

    Each row of ``A`` touches only these ``n_fixed + 2`` effect slots (plus its
    own O-U slot), which keeps all per-session products small.
    """
    return np.column_stack([frame.X, np.ones(frame.n), frame.log_vt])


def _gamma_log_logdensity(psi, shape, rate):
    """Log-density of ``log(tau)`` when ``tau ~ Gamma(shape, rate)`` (Jacobian included)."""
    return shape * np.log(rate) - gammaln(shape) + shape * psi - rate * np.exp(psi)


def _normal_logdensity(x, mean, precision):
    return 0.5 * (np.log(precision) - np.log(2 * np.pi)) - 0.5 * precision * (x - mean) ** 2


def log_hyperprior_terms(psi, priors: PriorSpec):
    """Per-hyperparameter log prior densities on the internal log scale."""
    psi = np.asarray(psi, dtype=float)
    return np.array(
        [
            _gamma_log_logdensity(psi[0], priors.tau_alpha_shape, priors.tau_alpha_rate),
            _gamma_log_logdensity(psi[1], priors.tau_beta1_shape, priors.tau_beta1_rate),
            _gamma_log_logdensity(psi[2], priors.tau_s_shape, priors.tau_s_rate),
            _normal_logdensity(psi[3], priors.log_phi_mean, priors.log_phi_precision),
        ]
    )


def log_hyperprior(theta: HyperParams, priors: PriorSpec):
    """Joint log prior density of the log-hyperparameters."""
    return float(np.sum(log_hyperprior_terms(theta.to_log(), priors)))
