"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The heavy criteria (recovery, CV, scaling) take minutes; run them alone with
``pytest tests/test_acceptance.py -v``.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from acceptance_log import criterion
from oracles import conjugate_posterior, hyperprior_logdensity, mvn_logpdf, ou_cov, random_toy, rps_oracle
from vo2lgm.cli import main
from vo2lgm.dataset import PHYSIO, build_frame, smooth
from vo2lgm.evaluate import CvConfig, confusion, lopo_cv, rps, run_fold, zero_one_loss
from vo2lgm.inference import InferenceConfig, conditional, fit
from vo2lgm.lgm import HyperParams, PriorSpec
from vo2lgm.ou import OuParams, OuPath, ou_logpdf, ou_precision
from vo2lgm.predict import CategoryThresholds, classify
from vo2lgm.simulate import CovariateSettings, GenerativeConfig, irregular_grid, simulate

pytestmark = pytest.mark.acceptance


def test_1_ou_oracle():
    with criterion(1, "O-U precision and log-density match dense oracles") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst_inv = worst_lp = 0.0
        for case in range(50):
            n = int(rng.integers(1, 13))
            phi = float(np.exp(rng.uniform(-4, 1)))
            tau_s = float(np.exp(rng.uniform(0, 5)))
            t = irregular_grid(n, rng.uniform(0.5, 5), rng.uniform(0, 0.9), rng)
            p = OuParams(phi, tau_s)
            K = ou_cov(t, phi, tau_s)
            inv = np.linalg.inv(ou_precision(t, p).toarray())
            worst_inv = max(worst_inv, np.max(np.abs(inv - K) / np.abs(K)))
            x = np.linalg.cholesky(K) @ rng.standard_normal(n)
            want = mvn_logpdf(x, K)
            worst_lp = max(worst_lp, abs(ou_logpdf(OuPath(t, x), p) - want) / max(1.0, abs(want)))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max rel inverse err={worst_inv:.2e}, max logpdf err={worst_lp:.2e}"
        assert worst_inv < 1e-10 and worst_lp < 1e-8 and elapsed < 5


def test_2_inference_exactness():
    with criterion(2, "conditional Gaussian matches high-precision conjugate oracle") as info:
        t0 = time.perf_counter()
        pr = PriorSpec()
        err_m = err_v = err_l = 0.0
        for seed in range(25):
            frame, theta = random_toy(1000 + seed, max_dim=50)
            cg = conditional(theta, frame, priors=pr)
            m, v, loglik = conjugate_posterior(frame, theta, pr)
            lm = loglik + hyperprior_logdensity(theta.tau_alpha, theta.tau_beta1, theta.tau_s, theta.phi, pr)
            err_m = max(err_m, np.max(np.abs(cg.mean - m)) / max(1.0, np.abs(m).max()))
            err_v = max(err_v, np.max(np.abs(cg.marginal_variances() - v) / v))
            err_l = max(err_l, abs(cg.log_marginal - lm) / max(1.0, abs(lm)))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"mean err={err_m:.1e}, var rel err={err_v:.1e}, log-marginal err={err_l:.1e}"
        assert max(err_m, err_v, err_l) < 1e-8 and elapsed < 30


def _recovery_one(seed):
    ds, truth = simulate(GenerativeConfig(seed=seed))
    res = fit(build_frame(ds), config=InferenceConfig(n_jobs=1))
    latent, _ = res.summaries()
    terms = res.layout.terms
    hits = [latent[terms.index(t)].q025 <= truth.fixed[terms.index(t)] <= latent[terms.index(t)].q975
            for t in ("log_vt", "log_petco2", "log_rr")]
    log_phi = float(res.grid.weights @ res.grid.psi[:, 3])
    return hits, log_phi


@pytest.mark.slow
def test_3_parameter_recovery():
    with criterion(3, "parameter recovery over 100 simulated datasets") as info:
        t0 = time.perf_counter()
        seeds = [50_000 + k for k in range(100)]
        workers = os.cpu_count() or 1
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                out = list(ex.map(_recovery_one, seeds))
        else:
            out = [_recovery_one(s) for s in seeds]
        hits = np.array([h for h, _ in out], dtype=bool)
        log_phi = np.array([lp for _, lp in out])
        truth = math.log(GenerativeConfig().phi)
        coverage = hits.mean()
        rel_bias = abs(log_phi.mean() - truth) / abs(truth)
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"coverage={coverage:.3f} (per term {np.round(hits.mean(axis=0), 2).tolist()}), "
                          f"log phi relative bias={rel_bias:.3f}")
        assert 0.88 <= coverage <= 1.0
        assert rel_bias < 0.25
        assert elapsed < 30 * 60


def test_4_metrics():
    with criterion(4, "ranked probability score and loss identities") as info:
        u = rps([0.25] * 4, 0)
        assert abs(u - 0.2916666666666667) < 1e-12
        eye = np.eye(4)
        displaced = [rps(eye[k], 0) for k in range(4)]
        assert displaced == [0.0, 1 / 3, 2 / 3, 1.0]
        assert displaced[1] < displaced[2] < displaced[3]
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            p, o = rng.integers(0, 4, n), rng.integers(0, 4, n)
            cm = confusion(p, o)
            assert cm.counts.sum() == n
            assert abs(zero_one_loss(p, o) - (1 - np.trace(cm.counts) / n)) < 1e-15
            probs = rng.dirichlet(np.ones(4))
            assert abs(rps(probs, o[0]) - rps_oracle(probs, o[0])) < 1e-12
        info["detail"] = f"uniform RPS={u:.15f}, displaced={[round(d, 4) for d in displaced]}"


def test_5_classification_contracts():
    with criterion(5, "classification probabilities, monotonicity, boundaries") as info:
        rng = np.random.default_rng(5)
        m = rng.normal(1.6, 0.8, (10_000, 20))
        v = rng.exponential(0.1, (10_000, 20))
        p = classify((m, v))
        sum_err = np.max(np.abs(p.sum(axis=1) - 1))
        assert sum_err < 1e-9
        for _ in range(100):
            mm = rng.normal(1.6, 0.8, 30)
            vv = rng.exponential(0.1, 30)
            shift = rng.uniform(0, 1.5)
            a, b = classify((mm, vv)), classify((mm + shift, vv))
            assert np.all(np.cumsum(b)[:3] <= np.cumsum(a)[:3] + 1e-12)
        th = CategoryThresholds()
        for value, cat in ((3.5, 1), (5.0, 2), (7.5, 3)):
            pm = classify((math.log(value), 0.0))
            assert pm[cat] == 1.0 and th.category_of(value) == cat
        info["detail"] = f"max |sum-1|={sum_err:.1e}"


@pytest.mark.slow
def test_6_end_to_end_cv():
    with criterion(6, "LOPO-CV on a 10-patient simulation") as info:
        t0 = time.perf_counter()
        ds, _ = simulate(GenerativeConfig(n_patients=10, seed=606))
        cfg = CvConfig(n_jobs=os.cpu_count() or 1)
        rep = lopo_cv(ds, cfg, seed=6)
        assert all(f.ok for f in rep.folds)
        preds = rep.predictions
        obs = preds["observed_category_index"].to_numpy()
        uniform = float(np.mean([rps_oracle([0.25] * 4, o) for o in obs]))
        acc = 1 - rep.zero_one_loss
        score = rep.mean_rps
        pid = ds.patient_ids[3]
        base = run_fold(ds, pid, CvConfig(), seed=1)
        b = ds.breaths.copy()
        held = b["patient_id"] == pid
        b.loc[held, ["vo2", "vt", "rr"]] *= 1.3
        probe = run_fold(ds.with_breaths(b), pid, CvConfig(), seed=1)
        leak_free = np.array_equal(base.fixed_means, probe.fixed_means)
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"accuracy={acc:.3f}, mean RPS={score:.4f}, uniform-forecast RPS={uniform:.4f}, "
                          f"leakage bit-exact={leak_free}")
        assert acc > 0.25
        assert score < uniform and score < 0.375
        assert leak_free
        assert elapsed < 10 * 60


def test_7_smoothing():
    with criterion(7, "three-value smoothing with cough spikes") as info:
        ds, _ = simulate(GenerativeConfig(n_patients=4, seed=7, covariates=CovariateSettings(cough_rate=0.08)))
        sm = smooth(ds, 3)
        assert np.array_equal(sm.breaths["t"].to_numpy(), ds.breaths["t"].to_numpy())
        ident = smooth(ds, 1)
        assert ident.breaths.equals(ds.breaths)
        ratios = []
        for col in PHYSIO:
            before = ds.breaths.groupby("session_id")[col].var()
            after = sm.breaths.groupby("session_id")[col].var()
            assert np.all(after < before), col
            ratios.append(float((after / before).max()))
        info["detail"] = f"max per-session variance ratio by column={dict(zip(PHYSIO, [round(r, 3) for r in ratios]))}"


def _scaled(n):
    ds, _ = simulate(GenerativeConfig(n_patients=20, sessions_per_patient=5, breaths_per_session=n // 100, seed=8))
    return build_frame(ds)


@pytest.mark.slow
def test_8_scaling():
    with criterion(8, "scaling of per-point factorization and 20k fit time") as info:
        th = HyperParams(38.63, 44.30, 46.75, 0.09)
        sizes = [5000, 10_000, 20_000]
        times = []
        frames = {}
        for n in sizes:
            fr = frames[n] = _scaled(n)
            assert fr.n == n
            conditional(th, fr)
            best = math.inf
            for _ in range(5):
                t = time.perf_counter()
                conditional(th, fr)
                best = min(best, time.perf_counter() - t)
            times.append(best)
        slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
        t = time.perf_counter()
        res = fit(frames[20_000], config=InferenceConfig(n_jobs=os.cpu_count() or 1))
        fit_time = time.perf_counter() - t
        info["detail"] = (f"per-point seconds={np.round(times, 4).tolist()}, log-log slope={slope:.2f}, "
                          f"20k fit={fit_time:.1f}s on {os.cpu_count()} core(s), grid={len(res.grid.psi)}")
        assert slope < 1.25
        assert fit_time < 300


def _run_pipeline(root, n_jobs):
    data = root / "data"
    assert main(["simulate", "--out", str(data), "--n-patients", "3", "--sessions-per-patient", "2",
                 "--breaths-per-session", "40", "--seed", "9"]) == 0
    io = ["--breaths", str(data / "breaths.csv"), "--sessions", str(data / "sessions.csv"),
          "--patients", str(data / "patients.csv"), "--n-jobs", str(n_jobs), "--seed", "3"]
    assert main(["fit", *io, "--out", str(root / "fit")]) == 0
    assert main(["predict", *io, "--bundle", str(root / "fit" / "fit.zip"), "--n-samples", "300",
                 "--out", str(root / "pred" / "pred.csv")]) == 0
    assert main(["cv", *io, "--n-samples", "300", "--out", str(root / "cv")]) == 0
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_9_determinism(tmp_path):
    with criterion(9, "fit, predict and cv outputs byte-identical across runs") as info:
        a = _run_pipeline(tmp_path / "a", 1)
        b = _run_pipeline(tmp_path / "b", 1)
        c = _run_pipeline(tmp_path / "c", 3)
        diff_ab = sorted(k for k in a if a[k] != b.get(k))
        diff_ac = sorted(k for k in a if a[k] != c.get(k))
        info["detail"] = f"{len(a)} files compared; differing serial={diff_ab}, parallel={diff_ac}"
        assert a.keys() == b.keys() == c.keys()
        assert not diff_ab and not diff_ac
