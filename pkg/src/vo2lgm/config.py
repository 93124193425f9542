"""Run configuration: dataclasses, INI loading, canonical hashing.

A config file uses INI sections mirroring the dataclasses::

    [data]
    smoothing_window = 3
    quality = good, reasonable
    screen.vt = 0.05, 5.0
    min_age = 40

    [priors]
    tau_s_shape = 50

    [inference]
    grid_threshold = 2.5

    [run]
    seed = 1
    n_samples = 1000

Precedence: defaults < command-line flags < config file. Values present in
the file win over flags given on the same invocation.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import QUALITY_LEVELS
from .evaluate import CvConfig
from .inference import InferenceConfig
from .lgm import PriorSpec
from .predict import CategoryThresholds


@dataclass(frozen=True)
class DataConfig:
    smoothing_window: int = 3
    quality: tuple = QUALITY_LEVELS
    screen: tuple = ()  # ((column, lo, hi), ...)
    min_age: float | None = None
    petco2_unit: str = "kPa"
    include_patient_covariates: bool = True

    def __post_init__(self):
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be a positive odd integer")
        bad = set(self.quality) - set(QUALITY_LEVELS)
        if bad:
            raise ValueError(f"unknown quality levels: {sorted(bad)}")
        if self.petco2_unit not in ("kPa", "mmHg"):
            raise ValueError("petco2_unit must be kPa or mmHg")

    @property
    def screen_bounds(self):
        return {c: (lo, hi) for c, lo, hi in self.screen}


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    n_samples: int = 1000
    boundaries: tuple = (3.5, 5.0, 7.5)
    alert_threshold: float = 0.20
    mode: str = "new_patient"
    t_cut: float = 1000.0
    session_id: str | None = None
    # parallelism does not change results, so it is excluded from the hash
    n_jobs: int = field(default=1, metadata={"hash": False})

    @property
    def thresholds(self):
        return CategoryThresholds(tuple(self.boundaries))


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    priors: PriorSpec = PriorSpec()
    inference: InferenceConfig = InferenceConfig()
    run: RunSettings = RunSettings()

    def to_dict(self, hashed_only=False):
        out = {}
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            d = {}
            for g in dataclasses.fields(sub):
                if hashed_only and (not g.metadata.get("hash", True) or g.name == "n_jobs"):
                    continue
                d[g.name] = _jsonable(getattr(sub, g.name))
            out[f.name] = d
        return out

    def canonical_json(self):
        return json.dumps(self.to_dict(hashed_only=True), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def cv_config(self):
        return CvConfig(
            priors=self.priors,
            inference=dataclasses.replace(self.inference, n_jobs=1),
            thresholds=self.run.thresholds,
            n_samples=self.run.n_samples,
            alert_threshold=self.run.alert_threshold,
            include_patient_covariates=self.data.include_patient_covariates,
            n_jobs=self.run.n_jobs,
        )

    @classmethod
    def from_dict(cls, d):
        parts = {}
        for f in dataclasses.fields(cls):
            sub_cls = type(getattr(cls(), f.name))
            vals = dict(d.get(f.name, {}))
            names = {g.name for g in dataclasses.fields(sub_cls)}
            unknown = set(vals) - names
            if unknown:
                raise ValueError(f"unknown [{f.name}] keys: {sorted(unknown)}")
            for g in dataclasses.fields(sub_cls):
                if g.name in vals and isinstance(getattr(sub_cls(), g.name), tuple):
                    vals[g.name] = _tuplify(vals[g.name])
            parts[f.name] = sub_cls(**vals)
        return cls(**parts)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def default_jobs():
    return os.cpu_count() or 1


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and all(isinstance(x, (int, float)) for x in default):
            return tuple(float(x) for x in items)
        return tuple(items)
    if raw.lower() in ("none", ""):
        return None
    try:
        return float(raw)
    except ValueError:
        return raw


def load_ini(path, base: RunConfig | None = None) -> RunConfig:
    """Overlay the settings in an INI file on ``base`` (or the defaults)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path)
    base = base or RunConfig()
    d = base.to_dict()
    for section in parser.sections():
        if section not in d:
            raise ValueError(f"{path}: unknown section [{section}]")
        current = getattr(base, section)
        screen = list(d[section].get("screen", [])) if section == "data" else None
        for key, raw in parser.items(section):
            if section == "data" and key.startswith("screen."):
                col = key.split(".", 1)[1]
                lo, hi = (float(x) for x in raw.split(","))
                screen = [s for s in screen if s[0] != col] + [[col, lo, hi]]
                continue
            if key not in d[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            default = getattr(current, key)
            if key == "session_id":
                d[section][key] = raw.strip() or None
            elif default is None:
                d[section][key] = _parse_value(raw, 0.0)
            else:
                d[section][key] = _jsonable(_parse_value(raw, default))
        if screen is not None:
            d[section]["screen"] = screen
    return RunConfig.from_dict(d)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
