"""Fit bundles on disk: a zip of ``.npy`` arrays plus ``meta.json``.

Entries carry a fixed timestamp and are written in a fixed order, so equal
fits give byte-identical files. Loading re-factorises the conditional
Gaussian at every stored grid point; the stored log-posterior values are used
as a consistency check.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .dataset import ModelFrame
from .inference import FitResult, InferenceConfig, refit_on_grid
from .lgm import PriorSpec

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)

_FRAME_ARRAYS = ("X", "t", "session_index", "patient_index", "session_patient")


class BundleError(ValueError):
    pass


def _write_entry(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(a):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_fit(fit: FitResult, path, provenance=None):
    """Write ``fit`` to ``path``; ``provenance`` is an extra JSON-able dict stored in the meta."""
    fr = fit.frame
    g = fit.grid
    arrays = {f"frame/{k}": getattr(fr, k) for k in _FRAME_ARRAYS}
    if fr.y is not None:
        arrays["frame/y"] = fr.y
    arrays.update(
        {"grid/z": g.z, "grid/psi": g.psi, "grid/log_post": g.log_post, "grid/weights": g.weights,
         "grid/mode": g.mode, "grid/curvature": g.curvature}
    )
    meta = {
        "format_version": FORMAT_VERSION,
        "terms": list(fr.terms),
        "session_ids": list(fr.session_ids),
        "patient_ids": list(fr.patient_ids),
        "centering": fr.centering,
        "priors": dataclasses.asdict(fit.priors),
        # parallelism is a run detail, not part of the result
        "inference": {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in dataclasses.asdict(fit.config).items() if k != "n_jobs"
        },
        "provenance": provenance or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name in sorted(arrays):
            _write_entry(zf, name + ".npy", _npy_bytes(arrays[name]))
    return path


def read_meta(path):
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("meta.json"))


def load_fit(path, check_tol=1e-6) -> FitResult:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"fit bundle not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {
                n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                for n in zf.namelist() if n.endswith(".npy")
            }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise BundleError(f"{path}: not a fit bundle ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"{path}: unsupported bundle version {meta.get('format_version')}")
    frame = ModelFrame(
        X=arrays["frame/X"],
        terms=tuple(meta["terms"]),
        y=arrays.get("frame/y"),
        t=arrays["frame/t"],
        session_index=arrays["frame/session_index"],
        patient_index=arrays["frame/patient_index"],
        session_ids=tuple(meta["session_ids"]),
        patient_ids=tuple(meta["patient_ids"]),
        session_patient=arrays["frame/session_patient"],
        centering=dict(meta["centering"]),
    )
    priors = PriorSpec(**meta["priors"])
    inf = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["inference"].items()}
    config = InferenceConfig(**inf)
    fit = refit_on_grid(
        frame, arrays["grid/psi"], arrays["grid/weights"], arrays["grid/mode"], arrays["grid/curvature"],
        priors, config, z=arrays["grid/z"],
    )
    stored = arrays["grid/log_post"]
    if np.max(np.abs(fit.grid.log_post - stored)) > check_tol * max(1.0, np.max(np.abs(stored))):
        raise BundleError(f"{path}: re-evaluated log posterior disagrees with the stored values")
    return fit
