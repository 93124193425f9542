"""Synthetic datasets drawn from the generative model.

Covariate processes are non-physiological stand-ins: each session gets
log-scale baseline offsets, a smooth exercise bout that raises tidal volume
and respiratory rate together, and AR(1) wander. Defaults for the effects and
hyperparameters are the published posterior means; the covariate settings
are tuning choices made so that simulated VO2 visits all four intensity bands.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .dataset import FIXED_TERMS, Dataset, build_frame, write_dataset
from .lgm import design_matrix, layout
from .ou import OuParams, ou_sample

REFERENCE_FIXED = {
    "intercept": 1.32,
    "log_vt": 1.56,
    "log_petco2": 1.92,
    "log_rr": 1.11,
    "log_vt:log_petco2": -0.20,
    "log_vt:log_rr": 0.33,
    "sofa": -0.01,
    "gppaq2": -0.01,
    "gppaq3": 0.01,
    "gppaq4": 0.31,
    "sex": -0.08,
    "log_age": 0.35,
    "log_bmi": -1.13,
    "log_age:log_bmi": -2.12,
}
REFERENCE_HYPER = {"tau_alpha": 38.63, "tau_beta1": 44.30, "tau_s": 46.75, "phi": 0.09}


@dataclass(frozen=True)
class CovariateSettings:
    # tuning values, not estimates: baseline levels (vt in L, rr per min, petco2 in kPa)
    vt_level: float = 0.45
    rr_level: float = 20.0
    petco2_level: float = 5.0
    session_sd: tuple = (0.10, 0.08, 0.05)
    wander_sd: tuple = (0.06, 0.06, 0.03)
    wander_rho: float = 0.9
    bout_gain: tuple = (0.35, 0.30, 0.05)
    bout_level: tuple = (0.2, 1.0)
    # transient multiplicative spikes mimicking coughs
    cough_rate: float = 0.0
    cough_factor: float = 1.8


@dataclass(frozen=True)
class GenerativeConfig:
    fixed_effects: dict = field(default_factory=lambda: dict(REFERENCE_FIXED))
    tau_alpha: float = REFERENCE_HYPER["tau_alpha"]
    tau_beta1: float = REFERENCE_HYPER["tau_beta1"]
    tau_s: float = REFERENCE_HYPER["tau_s"]
    phi: float = REFERENCE_HYPER["phi"]
    obs_precision: float = float(np.exp(15.0))
    n_patients: int = 8
    sessions_per_patient: int = 3
    breaths_per_session: int = 150
    mean_gap: float = 3.0
    jitter: float = 0.5
    covariates: CovariateSettings = CovariateSettings()
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_alpha", "tau_beta1", "tau_s", "phi", "obs_precision"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_patients", "sessions_per_patient", "breaths_per_session"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        unknown = set(self.fixed_effects) - set(FIXED_TERMS)
        if unknown:
            raise ValueError(f"unknown fixed-effect terms: {sorted(unknown)}")

    def beta(self):
        return np.array([self.fixed_effects.get(t, 0.0) for t in FIXED_TERMS])


@dataclass
class SimTruth:
    fixed: np.ndarray
    session_effects: np.ndarray
    patient_slopes: np.ndarray
    ou: np.ndarray
    eta: np.ndarray
    hyper: dict

    @property
    def latent(self):
        """True latent vector in layout order."""
        return np.concatenate([self.fixed, self.session_effects, self.patient_slopes, self.ou])

    def to_json(self):
        return json.dumps(
            {
                "terms": list(FIXED_TERMS),
                "fixed": self.fixed.tolist(),
                "session_effects": self.session_effects.tolist(),
                "patient_slopes": self.patient_slopes.tolist(),
                "ou": self.ou.tolist(),
                "eta": self.eta.tolist(),
                "hyper": self.hyper,
            },
            indent=1,
        )


def irregular_grid(n, mean_gap, jitter, seed=None):
    """Cumulative sums of gaps drawn uniformly from ``mean_gap * [1 - jitter, 1 + jitter]``."""
    if not mean_gap > 0:
        raise ValueError("mean_gap must be positive")
    if not 0 <= jitter < 1:
        raise ValueError("jitter must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    gaps = mean_gap * rng.uniform(1 - jitter, 1 + jitter, size=int(n)) if jitter > 0 else np.full(int(n), float(mean_gap))
    return np.cumsum(gaps)


def _normal(rng, precision, size):
    if np.isinf(precision):
        return np.zeros(size)
    return rng.standard_normal(size) / np.sqrt(precision)


def _bout(n, rng, level):
    """Trapezoidal activity profile on [0, 1] over a session of ``n`` breaths."""
    u = np.linspace(0, 1, n)
    start = rng.uniform(0.15, 0.4)
    stop = rng.uniform(0.6, 0.85)
    ramp = 0.08
    rise = np.clip((u - start) / ramp, 0, 1)
    fall = np.clip((stop - u) / ramp, 0, 1)
    return rng.uniform(*level) * np.minimum(rise, fall)


def _ar1(n, rho, sd, rng):
    x = np.empty(n)
    z = rng.standard_normal(n) * sd
    x[0] = z[0]
    scale = np.sqrt(1 - rho**2)
    for k in range(1, n):
        x[k] = rho * x[k - 1] + scale * z[k]
    return x


def simulate(cfg: GenerativeConfig = GenerativeConfig()):
    """Draw a dataset and its realised latent truth.

    The linear predictor is evaluated through the same frame and design
    assembly used for fitting, so the truth is expressed in the analysis
    parameterisation (covariates centred at the sample means).
    """
    ss = np.random.SeedSequence(cfg.seed)
    r_pat, r_ses, r_time, r_cov, r_eff, r_ou, r_noise, r_cough = (np.random.default_rng(s) for s in ss.spawn(8))
    cs = cfg.covariates

    patient_ids = [f"P{i + 1:03d}" for i in range(cfg.n_patients)]
    patients = pd.DataFrame(
        {
            "patient_id": patient_ids,
            "age": np.round(r_pat.uniform(50, 86, cfg.n_patients), 1),
            "bmi": np.round(np.exp(r_pat.normal(np.log(27.0), 0.15, cfg.n_patients)), 1),
            "sex": r_pat.integers(0, 2, cfg.n_patients),
            "gppaq": r_pat.integers(1, 5, cfg.n_patients),
        }
    )
    rows = []
    sess_rows = []
    levels = np.log([cs.vt_level, cs.rr_level, cs.petco2_level])
    for i, pid in enumerate(patient_ids):
        for j in range(cfg.sessions_per_patient):
            sid = f"{pid}-S{j + 1}"
            sess_rows.append(
                {
                    "session_id": sid,
                    "patient_id": pid,
                    "sofa": int(r_ses.integers(0, 11)),
                    "quality": str(r_ses.choice(["good", "reasonable", "poor"], p=[0.5, 0.35, 0.15])),
                    "days_since_admission": int(r_ses.integers(7, 61)),
                }
            )
            n = cfg.breaths_per_session
            t = irregular_grid(n, cfg.mean_gap, cfg.jitter, r_time)
            bout = _bout(n, r_cov, cs.bout_level)
            logs = []
            for k in range(3):
                logs.append(
                    levels[k]
                    + r_cov.normal(0, cs.session_sd[k])
                    + cs.bout_gain[k] * bout
                    + _ar1(n, cs.wander_rho, cs.wander_sd[k], r_cov)
                )
            vals = np.exp(np.array(logs))
            if cs.cough_rate > 0:
                hits = r_cough.random(n) < cs.cough_rate
                vals[0, hits] *= cs.cough_factor
                vals[1, hits] *= cs.cough_factor
            rows.append(pd.DataFrame({"patient_id": pid, "session_id": sid, "t": t, "vt": vals[0], "rr": vals[1], "petco2": vals[2]}))
    breaths = pd.concat(rows, ignore_index=True)
    breaths["vo2"] = np.nan
    sessions = pd.DataFrame(sess_rows)
    ds = Dataset(breaths, sessions, patients)

    frame = build_frame(ds)
    lay = layout(frame)
    beta = cfg.beta()
    a = _normal(r_eff, cfg.tau_alpha, lay.n_sessions)
    b = _normal(r_eff, cfg.tau_beta1, lay.n_patients)
    s = np.empty(lay.n_obs)
    for k, sl in enumerate(frame.session_slices()):
        if np.isinf(cfg.tau_s):
            s[sl] = 0.0
        elif np.isinf(cfg.phi):
            s[sl] = _normal(r_ou, cfg.tau_s, sl.stop - sl.start)
        else:
            s[sl] = ou_sample(frame.t[sl], OuParams(phi=cfg.phi, tau_s=cfg.tau_s), seed=r_ou).values
    latent = np.concatenate([beta, a, b, s])
    eta = design_matrix(frame, lay) @ latent
    y = eta + _normal(r_noise, cfg.obs_precision, lay.n_obs)
    observed = ds.breaths.copy()
    observed["vo2"] = np.exp(y)
    ds = Dataset(observed, sessions, patients)
    truth = SimTruth(
        fixed=beta,
        session_effects=a,
        patient_slopes=b,
        ou=s,
        eta=eta,
        hyper={"tau_alpha": cfg.tau_alpha, "tau_beta1": cfg.tau_beta1, "tau_s": cfg.tau_s, "phi": cfg.phi},
    )
    return ds, truth


def export(ds: Dataset, truth: SimTruth, outdir, config: GenerativeConfig | None = None):
    """Write the standard input CSVs plus a truth sidecar into ``outdir``."""
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "breaths.csv", out / "sessions.csv", out / "patients.csv")
    (out / "truth.json").write_text(truth.to_json())
    if config is not None:
        cfg = asdict(config)
        (out / "generative_config.json").write_text(json.dumps(cfg, indent=1, default=float))
    return out
