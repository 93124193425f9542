"""Validation: scoring rules, confusion matrices, LOPO cross-validation, PPC splits."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import Dataset, build_frame
from .inference import InferenceConfig, fit
from .lgm import PriorSpec
from .predict import CATEGORIES, CategoryThresholds, argmax_category, classify, predict_rows, prediction_table

log = logging.getLogger(__name__)


def zero_one_loss(preds, obs):
    preds = np.asarray(preds)
    obs = np.asarray(obs)
    if preds.shape != obs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {obs.shape}")
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    return float(np.mean(preds != obs))


def rps(p, observed):
    """Ranked probability score of ordinal forecast(s).

    ``p`` is ``(R,)`` or ``(n, R)``; ``observed`` is the observed category
    index (or an array of them). Returns a float or an ``(n,)`` array.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    obs = np.atleast_1d(np.asarray(observed, dtype=int))
    R = p.shape[1]
    a = np.zeros_like(p)
    a[np.arange(p.shape[0]), obs] = 1.0
    cum = np.cumsum(p - a, axis=1)[:, : R - 1]
    out = np.sum(cum**2, axis=1) / (R - 1)
    return float(out[0]) if single else out


def mean_rps(p, observed):
    return float(np.mean(rps(np.atleast_2d(p), observed)))


@dataclass
class ConfusionMatrix:
    """Counts indexed ``(observed, predicted)``."""

    counts: np.ndarray
    labels: tuple = CATEGORIES

    @property
    def normalized(self):
        totals = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(totals > 0, self.counts / np.where(totals > 0, totals, 1), 0.0)
        return out

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.labels)


def confusion(preds, obs, n_categories=4):
    preds = np.asarray(preds, dtype=int)
    obs = np.asarray(obs, dtype=int)
    if preds.shape != obs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {obs.shape}")
    counts = np.zeros((n_categories, n_categories), dtype=np.int64)
    np.add.at(counts, (obs, preds), 1)
    return ConfusionMatrix(counts)


def plausibility_curve(probs, obs, thresholds):
    """Fraction of rows of each observed category whose own probability is at least ``q``.

    Returns an array ``(n_categories, len(thresholds))``; categories absent
    from ``obs`` give NaN rows.
    """
    probs = np.asarray(probs, dtype=float)
    obs = np.asarray(obs, dtype=int)
    q = np.asarray(thresholds, dtype=float)
    own = probs[np.arange(obs.size), obs]
    out = np.full((probs.shape[1], q.size), np.nan)
    for c in range(probs.shape[1]):
        sel = own[obs == c]
        if sel.size:
            out[c] = (sel[:, None] >= q[None, :]).mean(axis=0)
    return out


def ppc_split(ds: Dataset, session_id, t_cut=1000.0):
    """Split one session at ``t_cut``: earlier rows (and all other sessions) train, the rest test."""
    b = ds.breaths
    in_session = (b["session_id"] == str(session_id)).to_numpy()
    if not in_session.any():
        raise ValueError(f"session {session_id!r} not in dataset")
    t = b["t"].to_numpy()
    ts = t[in_session]
    if not ts.min() < t_cut <= ts.max():
        raise ValueError(f"t_cut={t_cut} outside the span of session {session_id} [{ts.min()}, {ts.max()}]")
    test = in_session & (t >= t_cut)
    return ds.subset(~test), ds.subset(test)


@dataclass(frozen=True)
class CvConfig:
    priors: PriorSpec = PriorSpec()
    inference: InferenceConfig = InferenceConfig()
    thresholds: CategoryThresholds = CategoryThresholds()
    n_samples: int = 1000
    alert_threshold: float = 0.20
    include_patient_covariates: bool = True
    n_jobs: int = 1


@dataclass
class FoldResult:
    patient_id: str
    predictions: pd.DataFrame | None
    fixed_means: np.ndarray | None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class CvReport:
    folds: list
    thresholds: CategoryThresholds = field(default_factory=CategoryThresholds)

    @property
    def predictions(self):
        frames = [f.predictions for f in self.folds if f.ok]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def fold_confusion(self, fold):
        p = fold.predictions
        return confusion(_category_index(p["category"], self.thresholds), p["observed_category_index"])

    @property
    def pooled(self):
        mats = [self.fold_confusion(f) for f in self.folds if f.ok]
        out = ConfusionMatrix(np.zeros((4, 4), dtype=np.int64))
        for m in mats:
            out = out + m
        return out

    @property
    def zero_one_loss(self):
        p = self.predictions
        return zero_one_loss(_category_index(p["category"], self.thresholds), p["observed_category_index"].to_numpy())

    @property
    def mean_rps(self):
        p = self.predictions
        return float(p["rps"].mean())

    def fold_table(self):
        rows = []
        for f in self.folds:
            if f.ok:
                p = f.predictions
                pred = _category_index(p["category"], self.thresholds)
                rows.append(
                    {
                        "patient_id": f.patient_id,
                        "n_rows": len(p),
                        "accuracy": float(np.mean(pred == p["observed_category_index"].to_numpy())),
                        "zero_one_loss": zero_one_loss(pred, p["observed_category_index"].to_numpy()),
                        "rps": float(p["rps"].mean()),
                        "status": "ok",
                        "error": "",
                    }
                )
            else:
                rows.append({"patient_id": f.patient_id, "n_rows": 0, "accuracy": np.nan, "zero_one_loss": np.nan,
                             "rps": np.nan, "status": "failed", "error": f.error})
        return pd.DataFrame(rows)

    def quality_table(self, quality_by_session):
        """Accuracy by session quality, both as a mean of session accuracies and pooled over rows."""
        p = self.predictions.copy()
        p["correct"] = _category_index(p["category"], self.thresholds) == p["observed_category_index"].to_numpy()
        p["quality"] = p["session_id"].map(quality_by_session)
        per_session = p.groupby(["quality", "session_id"], sort=False)["correct"].mean()
        rows = []
        for q in ("good", "reasonable", "poor"):
            sel = p[p["quality"] == q]
            if len(sel) == 0:
                continue
            rows.append(
                {
                    "quality": q,
                    "n_sessions": int(sel["session_id"].nunique()),
                    "n_rows": len(sel),
                    "session_mean_accuracy": float(per_session.loc[q].mean()),
                    "row_pooled_accuracy": float(sel["correct"].mean()),
                }
            )
        return pd.DataFrame(rows)

    def confusion_table(self):
        """Row-normalised pooled confusion matrix with loss and RPS footer rows."""
        cm = self.pooled
        names = list(self.thresholds.names)
        df = pd.DataFrame(cm.normalized, columns=names)
        df.insert(0, "observed", names)
        df["n"] = cm.counts.sum(axis=1)
        footer = pd.DataFrame(
            [
                {"observed": "L", names[0]: self.zero_one_loss},
                {"observed": "RPS", names[0]: self.mean_rps},
            ]
        )
        return pd.concat([df, footer], ignore_index=True)


def _category_index(names, thresholds):
    pos = {n: k for k, n in enumerate(thresholds.names)}
    return np.array([pos[n] for n in names], dtype=int)


def fold_seed(seed, k):
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(k),)).generate_state(1)[0])


def run_fold(ds: Dataset, patient_id, config: CvConfig, seed):
    """Fit without ``patient_id`` and score that patient's rows as a new patient."""
    pid = str(patient_id)
    held = (ds.breaths["patient_id"] == pid).to_numpy()
    train = ds.subset(~held)
    test = ds.subset(held)
    try:
        if pid in set(train.breaths["patient_id"]):
            raise AssertionError("held-out patient present in the training fold")
        train_frame = build_frame(train, include_patient_covariates=config.include_patient_covariates)
        res = fit(train_frame, config.priors, config.inference)
        test_frame = build_frame(test, centering=train_frame.centering,
                                 include_patient_covariates=config.include_patient_covariates)
        draws = predict_rows(res, test_frame, mode="new_patient", n=config.n_samples, seed=seed)
        probs = classify(draws, config.thresholds)
        table = prediction_table(test_frame, draws, config.thresholds, config.alert_threshold, probs)
        obs = config.thresholds.category_of(test.breaths["vo2"].to_numpy())
        table["observed_vo2"] = test.breaths["vo2"].to_numpy()
        table["observed_category_index"] = obs
        table["observed_category"] = np.asarray(config.thresholds.names, dtype=object)[obs]
        table["rps"] = rps(probs, obs)
        return FoldResult(pid, table, res.fixed_effect_means())
    except Exception as exc:  # noqa: BLE001 - a failing fold must not abort the others
        log.warning("fold %s failed: %s", pid, exc)
        return FoldResult(pid, None, None, error=f"{type(exc).__name__}: {exc}")


def _run_fold_args(args):
    return run_fold(*args)


def lopo_cv(ds: Dataset, config: CvConfig = CvConfig(), seed=0):
    """Leave-one-patient-out cross-validation.

    Each fold refits on the remaining patients with centering constants
    computed from that training fold only, then predicts the held-out
    patient's rows in ``new_patient`` mode.
    """
    patients = ds.patient_ids
    if len(patients) < 2:
        raise ValueError("LOPO-CV needs at least two patients")
    jobs = [(ds, pid, config, fold_seed(seed, k)) for k, pid in enumerate(patients)]
    if config.n_jobs > 1:
        with ProcessPoolExecutor(config.n_jobs) as ex:
            folds = list(ex.map(_run_fold_args, jobs))
    else:
        folds = [run_fold(*job) for job in jobs]
    return CvReport(folds, config.thresholds)


def observed_categories(vo2, thresholds=CategoryThresholds()):
    return thresholds.category_of(np.asarray(vo2, dtype=float))


def hard_predictions(probs):
    return argmax_category(probs)
