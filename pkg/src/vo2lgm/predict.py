"""Predictive distributions of log VO2 and intensity-category probabilities.

Each joint posterior draw of (fixed effects, hyperparameters) gives a Gaussian
predictive for a row; the random effects and O-U term are integrated out in
closed form rather than by a second Monte Carlo layer. Category
probabilities are Gaussian interval probabilities averaged over draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .dataset import ModelFrame
from .inference import FitResult, mixture_quantile, sample_joint

CATEGORIES = ("rest", "low", "medium", "high")
MODES = ("new_patient", "new_session", "in_sample")


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryThresholds:
    """Half-open VO2 bands ``[lo, hi)``: a value on a boundary belongs to the higher band."""

    boundaries: tuple = (3.5, 5.0, 7.5)
    names: tuple = CATEGORIES

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.size != 3 or len(self.names) != 4:
            raise ValueError("need three boundaries and four category names")
        if np.any(np.diff(b) <= 0) or np.any(b <= 0):
            raise ValueError("boundaries must be positive and strictly increasing")

    @property
    def log_boundaries(self):
        return np.log(np.asarray(self.boundaries, dtype=float))

    def category_of(self, vo2):
        """Category index of VO2 value(s) on the natural scale."""
        return np.searchsorted(np.asarray(self.boundaries, dtype=float), vo2, side="right")

    def category_of_log(self, log_vo2):
        return np.searchsorted(self.log_boundaries, log_vo2, side="right")


@dataclass
class PredictiveDraws:
    """Per-row, per-draw Gaussian predictives for uncentred log VO2.

    ``mean`` and ``var`` have shape ``(n_rows, n_draws)``.
    """

    mean: np.ndarray
    var: np.ndarray

    @property
    def n_rows(self):
        return self.mean.shape[0]

    def summary_mean(self):
        return self.mean.mean(axis=1)

    def summary_sd(self):
        m = self.mean.mean(axis=1, keepdims=True)
        return np.sqrt(np.mean(self.var + (self.mean - m) ** 2, axis=1))

    def interval(self, level=0.95):
        """Central predictive interval per row from the Gaussian mixture over draws."""
        a = 0.5 * (1 - level)
        lo = np.empty(self.n_rows)
        hi = np.empty(self.n_rows)
        w = np.full(self.mean.shape[1], 1.0 / self.mean.shape[1])
        for r in range(self.n_rows):
            sd = np.sqrt(np.maximum(self.var[r], 1e-300))
            lo[r] = mixture_quantile(a, self.mean[r], sd, w, xtol=1e-9)
            hi[r] = mixture_quantile(1 - a, self.mean[r], sd, w, xtol=1e-9)
        return lo, hi


def _check_centering(fit: FitResult, frame: ModelFrame):
    ref = fit.centering
    for key, value in frame.centering.items():
        if key in ref and ref[key] != value:
            raise PredictionError(f"centering constant {key} differs from the fit ({value} != {ref[key]})")
    missing = [k for k in ref if k not in frame.centering and k != "log_vo2"]
    if missing:
        raise PredictionError(f"new frame lacks centering constants: {missing}")
    if tuple(frame.terms) != tuple(fit.layout.terms):
        raise PredictionError("new frame has different fixed-effect terms from the fit")


def _ou_fill(t_new, t_fit, s_fit, phi, tau_s):
    """Conditional mean/variance of O-U states at ``t_new`` given sampled states at ``t_fit``.

    ``s_fit`` has shape ``(len(t_fit), n_draws)``; ``phi`` and ``tau_s`` are per draw.
    """
    k = np.searchsorted(t_fit, t_new)
    mean = np.empty((t_new.size, s_fit.shape[1]))
    var = np.empty_like(mean)
    for r, (t, kk) in enumerate(zip(t_new, k)):
        if kk < t_fit.size and t_fit[kk] == t:
            mean[r] = s_fit[kk]
            var[r] = 0.0
            continue
        prec = np.zeros(s_fit.shape[1])
        lin = np.zeros(s_fit.shape[1])
        if kk > 0:
            rho1 = np.exp(-phi * (t - t_fit[kk - 1]))
            c1 = tau_s / -np.expm1(-2 * phi * (t - t_fit[kk - 1]))
            prec += c1
            lin += c1 * rho1 * s_fit[kk - 1]
        else:
            prec += tau_s
        if kk < t_fit.size:
            d2 = t_fit[kk] - t
            rho2 = np.exp(-phi * d2)
            c2 = tau_s / -np.expm1(-2 * phi * d2)
            prec += c2 * rho2**2
            lin += c2 * rho2 * s_fit[kk]
        mean[r] = lin / prec
        var[r] = 1.0 / prec
    return mean, var


def predict_rows(fit: FitResult, new_frame: ModelFrame, mode="new_patient", n=1000, seed=0, samples=None):
    """Per-row Gaussian predictives of log VO2 for each joint posterior draw.

    Parameters
    ----------
    fit : FitResult
    new_frame : ModelFrame
        Built with the fit's centering constants.
    mode : {"new_patient", "new_session", "in_sample"}
        ``new_patient`` integrates the session intercept, patient slope and
        O-U term; ``new_session`` uses the known patient's sampled slope;
        ``in_sample`` continues fitted sessions, conditioning the O-U term on
        the sampled states at neighbouring fitted times.
    n, seed :
        Number of joint posterior draws and their seed.
    samples : JointSamples, optional
        Reuse existing draws (must include O-U states for ``in_sample``).

    Returns
    -------
    PredictiveDraws
        On the uncentred log VO2 scale. The fixed observation noise
        (variance ``1/tau``) is not added.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    _check_centering(fit, new_frame)
    lay = fit.layout
    fr_fit = fit.frame
    if samples is None:
        samples = sample_joint(fit, n, seed, include_ou=(mode == "in_sample"))
    theta = samples.theta.T  # (4, n_draws)
    beta = samples.latent[:, lay.fixed].T
    mean = new_frame.X @ beta
    offset = fit.centering.get("log_vo2", 0.0)
    vt = new_frame.log_vt[:, None]

    if mode == "new_patient":
        var = 1.0 / theta[0] + vt**2 / theta[1] + 1.0 / theta[2]
        var = np.broadcast_to(var, mean.shape).copy()
    elif mode == "new_session":
        pos = {p: k for k, p in enumerate(fr_fit.patient_ids)}
        unknown = [p for p in new_frame.patient_ids if p not in pos]
        if unknown:
            raise PredictionError(f"patient(s) not in the fit: {unknown}")
        pidx = np.array([pos[p] for p in new_frame.patient_ids])[new_frame.patient_index]
        slopes = samples.latent[:, lay.patients].T[pidx]
        mean = mean + vt * slopes
        var = np.broadcast_to(1.0 / theta[0] + 1.0 / theta[2], mean.shape).copy()
    else:
        spos = {s: k for k, s in enumerate(fr_fit.session_ids)}
        unknown = [s for s in new_frame.session_ids if s not in spos]
        if unknown:
            raise PredictionError(f"session(s) not in the fit: {unknown}")
        ppos = {p: k for k, p in enumerate(fr_fit.patient_ids)}
        sidx = np.array([spos[s] for s in new_frame.session_ids])[new_frame.session_index]
        pidx = np.array([ppos[p] for p in new_frame.patient_ids])[new_frame.patient_index]
        a = samples.latent[:, lay.sessions].T[sidx]
        b = samples.latent[:, lay.patients].T[pidx]
        mean = mean + a + vt * b
        var = np.empty_like(mean)
        fit_slices = fr_fit.session_slices()
        s_all = samples.latent[:, lay.ou].T
        for k_new, sl_new in enumerate(new_frame.session_slices()):
            k_fit = spos[new_frame.session_ids[k_new]]
            sl_fit = fit_slices[k_fit]
            m_s, v_s = _ou_fill(new_frame.t[sl_new], fr_fit.t[sl_fit], s_all[sl_fit], theta[3], theta[2])
            mean[sl_new] += m_s
            var[sl_new] = v_s
        var = np.maximum(var, 1.0 / fit.priors.obs_precision)
    return PredictiveDraws(mean=mean + offset, var=var)


def _band_probs(mean, var, cuts):
    """Band probabilities for flat arrays of Gaussian draws, shape ``(k, 4)``."""
    sd = np.sqrt(np.maximum(var, 0.0))
    point = sd == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cdf = ndtr((cuts[:, None] - mean[None, :]) / sd[None, :])
    if np.any(point):
        cat = np.searchsorted(cuts, mean[point], side="right")
        cdf[:, point] = (np.arange(cuts.size)[:, None] >= cat[None, :]).astype(float)
    full = np.vstack([np.zeros(mean.size), cdf, np.ones(mean.size)])
    return np.clip(np.diff(full, axis=0).T, 0.0, 1.0)


def classify(draws: PredictiveDraws | tuple, thresholds=CategoryThresholds(), chunk=512):
    """Category probabilities per row, averaged over predictive draws.

    ``draws`` may also be a ``(mean, var)`` pair: scalars for a single draw,
    1-d arrays for the draws of one row, or ``(n_rows, n_draws)`` arrays. A
    draw with zero variance is a point mass and is assigned by the half-open
    band rule.
    """
    mean, var = (draws.mean, draws.var) if isinstance(draws, PredictiveDraws) else draws
    mean, var = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(var, dtype=float))
    cuts = thresholds.log_boundaries
    if mean.ndim <= 1:
        probs = _band_probs(mean.reshape(-1), var.reshape(-1), cuts)
        probs = probs[0] if mean.ndim == 0 else probs.mean(axis=0)
        return probs / probs.sum()
    out = np.empty((mean.shape[0], 4))
    for a in range(0, mean.shape[0], chunk):
        m = mean[a : a + chunk]
        v = var[a : a + chunk]
        pr = _band_probs(m.reshape(-1), v.reshape(-1), cuts).reshape(m.shape + (4,))
        out[a : a + chunk] = pr.mean(axis=1)
    return out / out.sum(axis=1, keepdims=True)


def argmax_category(p):
    """Index of the most probable category; exact ties go to the higher category."""
    p = np.asarray(p, dtype=float)
    rev = p[..., ::-1]
    return p.shape[-1] - 1 - np.argmax(rev, axis=-1)


def high_alert(p, threshold=0.20):
    """True when the probability of the highest band reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(p, dtype=float)[..., -1] >= threshold


def prediction_table(frame: ModelFrame, draws: PredictiveDraws, thresholds=CategoryThresholds(), alert_threshold=0.20, probs=None):
    """Tidy per-row output for the prediction CSV."""
    if probs is None:
        probs = classify(draws, thresholds)
    cat = argmax_category(probs)
    return pd.DataFrame(
        {
            "patient_id": np.asarray(frame.patient_ids, dtype=object)[frame.patient_index],
            "session_id": np.asarray(frame.session_ids, dtype=object)[frame.session_index],
            "t": frame.t,
            "pred_mean_log_vo2": draws.summary_mean(),
            "pred_sd_log_vo2": draws.summary_sd(),
            "p_rest": probs[:, 0],
            "p_low": probs[:, 1],
            "p_medium": probs[:, 2],
            "p_high": probs[:, 3],
            "category": np.asarray(thresholds.names, dtype=object)[cat],
            "high_alert": high_alert(probs, alert_threshold),
        }
    )
