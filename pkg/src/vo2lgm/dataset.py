"""Breath-by-breath data: ingest, validation, smoothing, filtering, model frames."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

QUALITY_LEVELS = ("good", "reasonable", "poor")
PHYSIO = ("vt", "rr", "petco2")
BREATH_COLUMNS = ("patient_id", "session_id", "t_seconds", "vo2", "vt", "rr", "petco2")
SESSION_COLUMNS = ("session_id", "patient_id", "sofa", "quality", "days_since_admission")
PATIENT_COLUMNS = ("patient_id", "age", "bmi", "sex", "gppaq")
MMHG_PER_KPA = 7.50061683

PHYSIO_TERMS = (
    "intercept",
    "log_vt",
    "log_petco2",
    "log_rr",
    "log_vt:log_petco2",
    "log_vt:log_rr",
)
PATIENT_TERMS = (
    "sofa",
    "gppaq2",
    "gppaq3",
    "gppaq4",
    "sex",
    "log_age",
    "log_bmi",
    "log_age:log_bmi",
)
FIXED_TERMS = PHYSIO_TERMS + PATIENT_TERMS


class DataError(ValueError):
    """Invalid input data; ``row`` is the 1-based data row when known."""

    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class EmptyDatasetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BreathRecord:
    patient_id: str
    session_id: str
    t: float
    vt: float
    rr: float
    petco2: float
    vo2: float | None = None


@dataclass(frozen=True)
class SessionMeta:
    session_id: str
    patient_id: str
    sofa: int
    quality: str
    days_since_admission: int = 0

    def __post_init__(self):
        if self.quality not in QUALITY_LEVELS:
            raise DataError(f"quality must be one of {QUALITY_LEVELS}, got {self.quality!r}")


@dataclass(frozen=True)
class PatientMeta:
    patient_id: str
    age: float
    bmi: float
    sex: int
    gppaq: int

    def __post_init__(self):
        if not self.age > 0 or not self.bmi > 0:
            raise DataError(f"patient {self.patient_id}: age and bmi must be positive")
        if self.gppaq not in (1, 2, 3, 4):
            raise DataError(f"patient {self.patient_id}: gppaq must be in 1..4, got {self.gppaq}")


def _first_appearance_order(values):
    return list(dict.fromkeys(values))


@dataclass(frozen=True)
class Dataset:
    """Breath records grouped patient -> session -> time, plus metadata tables.

    ``breaths`` has columns ``patient_id, session_id, t, vo2, vt, rr, petco2``
    and is sorted by patient and session (first-appearance order) and time.
    Treat instances as immutable: every operation returns a new Dataset.
    """

    breaths: pd.DataFrame
    sessions: pd.DataFrame | None = None
    patients: pd.DataFrame | None = None
    petco2_unit: str = "kPa"

    def __post_init__(self):
        b = self.breaths.copy()
        for col in ("patient_id", "session_id"):
            b[col] = b[col].astype(str)
        if "vo2" not in b:
            b["vo2"] = np.nan
        b = b[["patient_id", "session_id", "t", "vo2", "vt", "rr", "petco2"]]
        pat_order = {p: k for k, p in enumerate(_first_appearance_order(b["patient_id"]))}
        ses_order = {s: k for k, s in enumerate(_first_appearance_order(b["session_id"]))}
        key = pd.DataFrame(
            {
                "p": b["patient_id"].map(pat_order),
                "s": b["session_id"].map(ses_order),
                "t": b["t"],
            }
        )
        b = b.iloc[np.lexsort((key["t"].to_numpy(), key["s"].to_numpy(), key["p"].to_numpy()))]
        b = b.reset_index(drop=True)
        object.__setattr__(self, "breaths", b)
        if self.sessions is not None:
            s = self.sessions.copy()
            s["session_id"] = s["session_id"].astype(str)
            s["patient_id"] = s["patient_id"].astype(str)
            object.__setattr__(self, "sessions", s.reset_index(drop=True))
        if self.patients is not None:
            p = self.patients.copy()
            p["patient_id"] = p["patient_id"].astype(str)
            object.__setattr__(self, "patients", p.reset_index(drop=True))

    @classmethod
    def from_records(cls, records, sessions=None, patients=None):
        breaths = pd.DataFrame(
            {
                "patient_id": [r.patient_id for r in records],
                "session_id": [r.session_id for r in records],
                "t": [float(r.t) for r in records],
                "vo2": [np.nan if r.vo2 is None else float(r.vo2) for r in records],
                "vt": [float(r.vt) for r in records],
                "rr": [float(r.rr) for r in records],
                "petco2": [float(r.petco2) for r in records],
            }
        )
        _validate_breaths(breaths)
        s = None if sessions is None else pd.DataFrame([vars(m) for m in sessions])
        p = None if patients is None else pd.DataFrame([vars(m) for m in patients])
        return cls(breaths, s, p)

    def __len__(self):
        return len(self.breaths)

    @property
    def is_empty(self):
        return len(self.breaths) == 0

    @property
    def patient_ids(self):
        return _first_appearance_order(self.breaths["patient_id"])

    @property
    def session_ids(self):
        return _first_appearance_order(self.breaths["session_id"])

    @property
    def has_vo2(self):
        return len(self.breaths) > 0 and bool(self.breaths["vo2"].notna().all())

    def groups(self):
        """Nested ``{patient_id: {session_id: DataFrame}}`` view in time order."""
        out: dict[str, dict[str, pd.DataFrame]] = {}
        for (pid, sid), df in self.breaths.groupby(["patient_id", "session_id"], sort=False):
            out.setdefault(pid, {})[sid] = df
        return out

    def session_quality(self):
        if self.sessions is None:
            return {}
        return dict(zip(self.sessions["session_id"], self.sessions["quality"]))

    def subset(self, mask):
        """Dataset restricted to breath rows where ``mask`` is true; metadata trimmed."""
        b = self.breaths[np.asarray(mask, dtype=bool)]
        sessions = patients = None
        if self.sessions is not None:
            sessions = self.sessions[self.sessions["session_id"].isin(set(b["session_id"]))]
        if self.patients is not None:
            patients = self.patients[self.patients["patient_id"].isin(set(b["patient_id"]))]
        return Dataset(b, sessions, patients, self.petco2_unit)

    def with_breaths(self, breaths):
        return Dataset(breaths, self.sessions, self.patients, self.petco2_unit)


def _validate_breaths(b, path=None, row_numbers=None):
    """Check timestamps and positivity; ``row_numbers`` maps positions to reported rows."""
    rows = np.arange(1, len(b) + 1) if row_numbers is None else np.asarray(row_numbers)
    t = b["t"].to_numpy(dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        k = int(np.flatnonzero(~np.isfinite(t) | (t < 0))[0])
        raise DataError("t_seconds must be a non-negative number", rows[k], path)
    for col in ("vt", "rr", "petco2", "vo2"):
        v = b[col].to_numpy(dtype=float)
        bad = ~(v > 0)
        if col == "vo2":
            bad &= ~np.isnan(v)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise DataError(f"{col} must be strictly positive, got {v[k]}", rows[k], path)
    last: dict[str, float] = {}
    for k, (sid, tk) in enumerate(zip(b["session_id"].astype(str), t)):
        if sid in last and tk <= last[sid]:
            raise DataError(
                f"timestamps in session {sid} must be strictly increasing ({tk} after {last[sid]})",
                rows[k],
                path,
            )
        last[sid] = tk


def _read_table(path, columns, required, schema=None):
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path=path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if schema:
        df = df.rename(columns={v: k for k, v in schema.items()})
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}", path=path)
    return df[[c for c in columns if c in df.columns]]


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        return np.nan


def _to_numeric(df, cols, path, optional=()):
    out = df.copy()
    for col in cols:
        raw = out[col].str.strip()
        blank = raw == ""
        if col not in optional and blank.any():
            k = int(np.flatnonzero(blank.to_numpy())[0])
            raise DataError(f"missing value in column {col}", k + 1, path)
        # python's float() is correctly rounded; pd.to_numeric can be off by an ulp
        num = raw.map(_parse_float).where(~blank, np.nan)
        bad = num.isna() & ~blank
        if bad.any():
            k = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"unparseable number {raw.iloc[k]!r} in column {col}", k + 1, path)
        out[col] = num.astype(float)
    return out


def parse_breath_csv(path, schema: Mapping[str, str] | None = None, petco2_unit="kPa"):
    """Read a breath-by-breath CSV into a :class:`Dataset` (no metadata attached).

    ``schema`` maps canonical names (``patient_id, session_id, t_seconds, vo2,
    vt, rr, petco2``) to the file's column names. ``vo2`` may be absent.
    Errors carry the 1-based data row number.
    """
    required = [c for c in BREATH_COLUMNS if c != "vo2"]
    df = _read_table(path, BREATH_COLUMNS, required, schema)
    if "vo2" not in df:
        df = df.assign(vo2="")
    df = _to_numeric(df, ["t_seconds", "vt", "rr", "petco2", "vo2"], path, optional=("vo2",))
    df = df.rename(columns={"t_seconds": "t"})
    if petco2_unit == "mmHg":
        df["petco2"] = df["petco2"] / MMHG_PER_KPA
    elif petco2_unit != "kPa":
        raise ValueError(f"petco2_unit must be 'kPa' or 'mmHg', got {petco2_unit!r}")
    _validate_breaths(df, path)
    return Dataset(df)


def parse_sessions_csv(path, schema=None):
    df = _read_table(path, SESSION_COLUMNS, SESSION_COLUMNS, schema)
    df = _to_numeric(df, ["sofa", "days_since_admission"], path)
    df["quality"] = df["quality"].str.strip().str.lower()
    bad = ~df["quality"].isin(QUALITY_LEVELS)
    if bad.any():
        k = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"quality must be one of {QUALITY_LEVELS}", k + 1, path)
    if df["session_id"].duplicated().any():
        k = int(np.flatnonzero(df["session_id"].duplicated().to_numpy())[0])
        raise DataError("duplicate session_id", k + 1, path)
    return df


def parse_patients_csv(path, schema=None):
    df = _read_table(path, PATIENT_COLUMNS, PATIENT_COLUMNS, schema)
    df = _to_numeric(df, ["age", "bmi", "sex", "gppaq"], path)
    for col in ("age", "bmi"):
        bad = ~(df[col] > 0)
        if bad.any():
            k = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"{col} must be positive", k + 1, path)
    bad = ~df["gppaq"].isin([1, 2, 3, 4])
    if bad.any():
        k = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError("gppaq must be one of 1, 2, 3, 4", k + 1, path)
    if df["patient_id"].duplicated().any():
        k = int(np.flatnonzero(df["patient_id"].duplicated().to_numpy())[0])
        raise DataError("duplicate patient_id", k + 1, path)
    return df


def load_dataset(breaths_path, sessions_path=None, patients_path=None, schema=None, petco2_unit="kPa"):
    """Breath CSV plus optional session/patient metadata CSVs as one Dataset."""
    ds = parse_breath_csv(breaths_path, schema, petco2_unit)
    sessions = None if sessions_path is None else parse_sessions_csv(sessions_path)
    patients = None if patients_path is None else parse_patients_csv(patients_path)
    return Dataset(ds.breaths, sessions, patients, petco2_unit)


def write_dataset(ds: Dataset, breaths_path, sessions_path=None, patients_path=None):
    b = ds.breaths.rename(columns={"t": "t_seconds"})[list(BREATH_COLUMNS)]
    b.to_csv(breaths_path, index=False, lineterminator="\n")
    if sessions_path is not None and ds.sessions is not None:
        ds.sessions[list(SESSION_COLUMNS)].to_csv(sessions_path, index=False, lineterminator="\n")
    if patients_path is not None and ds.patients is not None:
        ds.patients[list(PATIENT_COLUMNS)].to_csv(patients_path, index=False, lineterminator="\n")


def smooth(ds: Dataset, window: int = 3, columns=PHYSIO + ("vo2",)):
    """Centered rolling mean within each session; windows truncate at session edges."""
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if window == 1 or ds.is_empty:
        return ds.with_breaths(ds.breaths)
    b = ds.breaths.copy()
    grouped = b.groupby("session_id", sort=False)
    for col in columns:
        b[col] = grouped[col].transform(
            lambda s: s.rolling(int(window), center=True, min_periods=1).mean()
        )
    return ds.with_breaths(b)


def filter_quality(ds: Dataset, allowed):
    """Drop sessions whose quality is not in ``allowed`` (and patients left without sessions)."""
    allowed = set(allowed)
    unknown = allowed - set(QUALITY_LEVELS)
    if unknown:
        raise ValueError(f"unknown quality level(s): {sorted(unknown)}")
    if ds.sessions is None:
        raise DataError("session metadata required for quality filtering")
    keep = set(ds.sessions.loc[ds.sessions["quality"].isin(allowed), "session_id"])
    out = ds.subset(ds.breaths["session_id"].isin(keep))
    if out.is_empty:
        warnings.warn("quality filter removed every session", EmptyDatasetWarning, stacklevel=2)
    return out


def screen(ds: Dataset, bounds: Mapping[str, tuple]):
    """Remove breaths with any screened column outside its inclusive ``(lo, hi)`` bounds."""
    keep = np.ones(len(ds), dtype=bool)
    for col, (lo, hi) in bounds.items():
        if col not in ds.breaths:
            raise ValueError(f"cannot screen unknown column {col!r}")
        v = ds.breaths[col].to_numpy(dtype=float)
        ok = np.ones_like(keep)
        if lo is not None:
            ok &= v >= lo
        if hi is not None:
            ok &= v <= hi
        if col == "vo2":
            ok |= np.isnan(v)
        keep &= ok
    return ds.subset(keep)


def exclude_patients_younger_than(ds: Dataset, min_age: float):
    if ds.patients is None:
        raise DataError("patient metadata required for age exclusion")
    young = set(ds.patients.loc[ds.patients["age"] < min_age, "patient_id"])
    return ds.subset(~ds.breaths["patient_id"].isin(young))


@dataclass(frozen=True)
class ModelFrame:
    """Design data for the fixed effects plus grouping/time indices per row.

    ``X`` holds the fixed-effect columns named by ``terms`` (intercept first,
    then ``log_vt``). ``session_index``/``patient_index`` are positions into
    ``session_ids``/``patient_ids`` (first-appearance order).
    """

    X: np.ndarray
    terms: tuple
    y: np.ndarray | None
    t: np.ndarray
    session_index: np.ndarray
    patient_index: np.ndarray
    session_ids: tuple
    patient_ids: tuple
    session_patient: np.ndarray
    centering: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def log_vt(self):
        return self.X[:, 1]

    def column(self, term):
        return self.X[:, self.terms.index(term)]

    def session_slices(self):
        """Contiguous row ranges for each session, in session index order."""
        idx = self.session_index
        starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
        stops = np.r_[starts[1:], idx.size]
        return [slice(int(a), int(b)) for a, b in zip(starts, stops)]


def build_frame(ds: Dataset, centering=None, include_patient_covariates=True, center_response=True):
    """Log-transform, center, and encode a dataset for fitting or prediction.

    Parameters
    ----------
    ds : Dataset
        Must carry session and patient metadata for every referenced id.
    centering : dict, optional
        Stored centering constants (from a training frame). When given they
        are applied as-is and never recomputed.
    include_patient_covariates : bool
        Include SOFA, GPPAQ dummies, sex, log age, log BMI and their product.
    center_response : bool
        Center log VO2 around its training mean.
    """
    if ds.is_empty:
        raise DataError("cannot build a model frame from an empty dataset")
    b = ds.breaths
    need_meta = include_patient_covariates
    if ds.sessions is None and need_meta:
        raise DataError("session metadata missing")
    if ds.patients is None and need_meta:
        raise DataError("patient metadata missing")

    logs = {}
    for col in PHYSIO:
        v = b[col].to_numpy(dtype=float)
        if np.any(~(v > 0)):
            raise DataError(f"non-positive {col} reaching log transform", int(np.flatnonzero(~(v > 0))[0]) + 1)
        logs[f"log_{col}"] = np.log(v)

    session_ids = tuple(_first_appearance_order(b["session_id"]))
    patient_ids = tuple(_first_appearance_order(b["patient_id"]))
    s_pos = {s: k for k, s in enumerate(session_ids)}
    p_pos = {p: k for k, p in enumerate(patient_ids)}
    session_index = b["session_id"].map(s_pos).to_numpy(dtype=np.int64)
    patient_index = b["patient_id"].map(p_pos).to_numpy(dtype=np.int64)
    session_patient = np.zeros(len(session_ids), dtype=np.int64)
    session_patient[session_index] = patient_index

    if need_meta:
        sess = ds.sessions.set_index("session_id")
        pats = ds.patients.set_index("patient_id")
        missing = [s for s in session_ids if s not in sess.index]
        if missing:
            raise DataError(f"session metadata missing for: {', '.join(missing[:5])}")
        missing = [p for p in patient_ids if p not in pats.index]
        if missing:
            raise DataError(f"patient metadata missing for: {', '.join(missing[:5])}")
        row_sess = sess.loc[b["session_id"]]
        row_pat = pats.loc[b["patient_id"]]
        for col in ("age", "bmi"):
            v = row_pat[col].to_numpy(dtype=float)
            if np.any(~(v > 0)):
                raise DataError(f"non-positive {col} reaching log transform")
            logs[f"log_{col}"] = np.log(v)

    y = None
    has_y = b["vo2"].notna().all()
    if has_y:
        logs["log_vo2"] = np.log(b["vo2"].to_numpy(dtype=float))

    if centering is None:
        centering = {k: float(np.mean(v)) for k, v in logs.items()}
        if not center_response and "log_vo2" in centering:
            centering["log_vo2"] = 0.0
    else:
        centering = dict(centering)
        absent = [k for k in logs if k not in centering and k != "log_vo2"]
        if absent:
            raise DataError(f"stored centering constants lack: {', '.join(absent)}")
    c = {k: v - centering[k] for k, v in logs.items() if k in centering}

    n = len(b)
    cols = [
        np.ones(n),
        c["log_vt"],
        c["log_petco2"],
        c["log_rr"],
        c["log_vt"] * c["log_petco2"],
        c["log_vt"] * c["log_rr"],
    ]
    terms = list(PHYSIO_TERMS)
    if need_meta:
        gppaq = row_pat["gppaq"].to_numpy(dtype=float)
        cols += [
            row_sess["sofa"].to_numpy(dtype=float),
            (gppaq == 2).astype(float),
            (gppaq == 3).astype(float),
            (gppaq == 4).astype(float),
            row_pat["sex"].to_numpy(dtype=float),
            c["log_age"],
            c["log_bmi"],
            c["log_age"] * c["log_bmi"],
        ]
        terms += list(PATIENT_TERMS)
    if has_y and "log_vo2" in centering:
        y = c["log_vo2"]
    elif has_y:
        raise DataError("stored centering constants lack log_vo2")

    return ModelFrame(
        X=np.column_stack(cols),
        terms=tuple(terms),
        y=y,
        t=b["t"].to_numpy(dtype=float),
        session_index=session_index,
        patient_index=patient_index,
        session_ids=session_ids,
        patient_ids=patient_ids,
        session_patient=session_patient,
        centering=centering,
    )
