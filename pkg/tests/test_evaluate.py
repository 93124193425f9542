import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import rps_oracle
from vo2lgm import evaluate as ev
from vo2lgm.dataset import Dataset
from vo2lgm.evaluate import (
    ConfusionMatrix,
    CvConfig,
    confusion,
    lopo_cv,
    mean_rps,
    plausibility_curve,
    ppc_split,
    rps,
    run_fold,
    zero_one_loss,
)
from vo2lgm.simulate import GenerativeConfig, simulate


# zero-one loss


def test_zero_one_examples():
    assert zero_one_loss([0, 1, 2, 3], [0, 1, 2, 3]) == 0.0
    assert zero_one_loss([0, 0, 1], [1, 1, 0]) == 1.0
    assert zero_one_loss([0, 1, 2, 3, 0], [0, 1, 2, 0, 1]) == pytest.approx(0.4)


@pytest.mark.parametrize("a,b", [([0, 1], [0]), ([], [])])
def test_zero_one_errors(a, b):
    with pytest.raises(ValueError):
        zero_one_loss(a, b)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=200))
def test_loss_is_one_minus_trace_fraction(pairs):
    p, o = map(np.array, zip(*pairs))
    cm = confusion(p, o)
    assert cm.counts.sum() == len(pairs)
    assert zero_one_loss(p, o) == pytest.approx(1 - np.trace(cm.counts) / cm.counts.sum(), abs=1e-15)
    assert cm.accuracy == pytest.approx(1 - zero_one_loss(p, o), abs=1e-15)


# RPS


def test_rps_uniform_rest():
    assert rps([0.25] * 4, 0) == pytest.approx(0.2916666666666667, abs=1e-12)
    assert rps([0.25] * 4, 0) == pytest.approx((0.75**2 + 0.5**2 + 0.25**2) / 3, abs=1e-15)


def test_rps_point_masses():
    eye = np.eye(4)
    for c in range(4):
        assert rps(eye[c], c) == 0.0
    assert rps(eye[1], 0) == pytest.approx(1 / 3, abs=1e-15)
    assert rps(eye[3], 0) == 1.0
    # ordinal sensitivity: strictly increasing with displacement
    for obs in range(4):
        scores = {abs(c - obs): rps(eye[c], obs) for c in range(4)}
        d = sorted(scores)
        assert all(scores[a] < scores[b] for a, b in zip(d, d[1:]))
        for k, s in scores.items():
            assert s == k / 3


probs4 = st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda w: sum(w) > 1e-6).map(
    lambda w: np.array(w) / sum(w))


@given(probs4, st.integers(0, 3))
def test_rps_matches_oracle_and_bounds(p, obs):
    r = rps(p, obs)
    assert r == pytest.approx(rps_oracle(p, obs), abs=1e-12)
    assert 0.0 <= r <= 1.0 + 1e-12


def test_rps_vectorised():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=50)
    obs = rng.integers(0, 4, 50)
    vec = rps(p, obs)
    assert vec.shape == (50,)
    np.testing.assert_allclose(vec, [rps_oracle(p[i], obs[i]) for i in range(50)], atol=1e-14)
    assert mean_rps(p, obs) == pytest.approx(vec.mean())


def test_rps_is_proper():
    rng = np.random.default_rng(1)
    p_star = np.array([0.1, 0.4, 0.3, 0.2])
    obs = rng.choice(4, size=10_000, p=p_star)
    honest = mean_rps(np.tile(p_star, (obs.size, 1)), obs)
    distortions = [np.array([0.25] * 4), np.array([0.4, 0.3, 0.2, 0.1]), np.array([0.1, 0.5, 0.3, 0.1]),
                   np.array([0.0, 1.0, 0.0, 0.0]), np.array([0.15, 0.35, 0.3, 0.2])]
    for q in distortions:
        assert honest <= mean_rps(np.tile(q, (obs.size, 1)), obs)


# confusion


def test_confusion_perfect_and_single():
    cm = confusion([0, 1, 2, 3, 3], [0, 1, 2, 3, 3])
    np.testing.assert_array_equal(cm.normalized, np.eye(4))
    one = confusion([2], [1])
    assert one.counts.sum() == 1 and one.counts[1, 2] == 1


def test_confusion_hand_tally():
    obs = [0, 0, 1, 1, 2, 2, 3, 3]
    pred = [0, 1, 1, 1, 3, 2, 3, 2]
    want = np.array([[1, 1, 0, 0], [0, 2, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])
    cm = confusion(pred, obs)
    np.testing.assert_array_equal(cm.counts, want)
    np.testing.assert_allclose(cm.normalized, want / 2)
    assert cm.accuracy == pytest.approx(5 / 8)


def test_confusion_absent_class_row_zero():
    cm = confusion([0, 1], [0, 1])
    assert np.all(cm.normalized[2:] == 0)
    np.testing.assert_allclose(cm.normalized[:2].sum(axis=1), 1.0)


def test_confusion_add():
    a = confusion([0, 1], [0, 0])
    b = confusion([3], [3])
    assert np.array_equal((a + b).counts, a.counts + b.counts)
    assert isinstance(a + b, ConfusionMatrix)


# plausibility


def test_plausibility_curve_properties():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(4), 200)
    p[:5] = np.eye(4)[[0, 1, 1, 2, 0]]
    obs = rng.integers(0, 3, 200)
    obs[:5] = [0, 1, 1, 2, 0]
    q = np.linspace(1e-9, 1, 41)
    curve = plausibility_curve(p, obs, q)
    assert curve.shape == (4, 41)
    np.testing.assert_allclose(curve[:3, 0], 1.0)
    assert np.all(np.isnan(curve[3]))
    assert np.all(np.diff(curve[:3], axis=1) <= 0)
    own = p[np.arange(200), obs]
    for c in range(3):
        assert curve[c, -1] == pytest.approx(np.mean(own[obs == c] == 1.0))


# posterior predictive split


def _span_dataset():
    t = np.arange(0.0, 2001.0, 100.0)
    n = t.size
    b = pd.DataFrame({"patient_id": ["A"] * n + ["A"] * 3, "session_id": ["s1"] * n + ["s2"] * 3,
                      "t": np.r_[t, 0, 1500, 3000], "vo2": 3.0, "vt": 0.5, "rr": 20.0, "petco2": 5.0})
    return Dataset(b)


def test_ppc_split_at_1000():
    ds = _span_dataset()
    train, test = ppc_split(ds, "s1", 1000.0)
    tr = train.breaths
    assert np.all(tr.loc[tr.session_id == "s1", "t"] < 1000)
    assert np.all(test.breaths["t"] >= 1000) and set(test.breaths["session_id"]) == {"s1"}
    assert len(tr[tr.session_id == "s2"]) == 3
    assert len(train) + len(test) == len(ds)


@pytest.mark.parametrize("sid,tc", [("s1", 2500.0), ("s1", 0.0), ("nope", 1000.0)])
def test_ppc_split_errors(sid, tc):
    with pytest.raises(ValueError):
        ppc_split(_span_dataset(), sid, tc)


# cross-validation


@pytest.fixture(scope="module")
def cv_data():
    ds, _ = simulate(GenerativeConfig(n_patients=3, sessions_per_patient=2, breaths_per_session=30, seed=5))
    return ds


FAST = CvConfig(n_samples=200)


def test_two_patient_bookkeeping():
    ds, _ = simulate(GenerativeConfig(n_patients=2, sessions_per_patient=2, breaths_per_session=25, seed=8))
    rep = lopo_cv(ds, FAST, seed=1)
    assert len(rep.folds) == 2 and all(f.ok for f in rep.folds)
    total = sum((rep.fold_confusion(f) for f in rep.folds[1:]), rep.fold_confusion(rep.folds[0]))
    assert np.array_equal(rep.pooled.counts, total.counts)
    assert rep.pooled.counts.sum() == len(ds)
    tab = rep.confusion_table()
    assert list(tab["observed"]) == ["rest", "low", "medium", "high", "L", "RPS"]
    assert tab.iloc[4, 1] == pytest.approx(rep.zero_one_loss)
    ft = rep.fold_table()
    assert list(ft["status"]) == ["ok", "ok"]


def test_lopo_needs_two_patients():
    ds, _ = simulate(GenerativeConfig(n_patients=1, sessions_per_patient=2, breaths_per_session=10, seed=8))
    with pytest.raises(ValueError):
        lopo_cv(ds, FAST)


def test_leakage_probe_bit_exact(cv_data):
    pid = cv_data.patient_ids[1]
    base = run_fold(cv_data, pid, FAST, seed=3)
    b = cv_data.breaths.copy()
    held = b["patient_id"] == pid
    b.loc[held, "vo2"] *= 1.7
    b.loc[held, "vt"] *= 0.6
    b.loc[held, "t"] += 11.0
    perturbed = Dataset(b, cv_data.sessions, cv_data.patients)
    other = run_fold(perturbed, pid, FAST, seed=3)
    assert base.ok and other.ok
    assert np.array_equal(base.fixed_means, other.fixed_means)
    assert not np.array_equal(base.predictions["observed_vo2"], other.predictions["observed_vo2"])


def test_failing_fold_reported(cv_data, monkeypatch):
    real = ev.predict_rows
    bad = cv_data.patient_ids[0]

    def flaky(fit, frame, *a, **k):
        if frame.patient_ids == (bad,):
            raise RuntimeError("boom")
        return real(fit, frame, *a, **k)

    monkeypatch.setattr(ev, "predict_rows", flaky)
    rep = lopo_cv(cv_data, FAST, seed=0)
    status = {f.patient_id: f.ok for f in rep.folds}
    assert status == {p: p != bad for p in cv_data.patient_ids}
    assert "boom" in rep.folds[0].error
    ft = rep.fold_table()
    assert ft.loc[0, "status"] == "failed" and ft["status"].iloc[1:].eq("ok").all()
    assert rep.pooled.counts.sum() == sum(len(f.predictions) for f in rep.folds if f.ok)


def test_quality_table(cv_data):
    rep = lopo_cv(cv_data, FAST, seed=0)
    q = rep.quality_table(cv_data.session_quality())
    assert set(q.columns) >= {"quality", "session_mean_accuracy", "row_pooled_accuracy"}
    assert q["n_rows"].sum() == len(cv_data)
    p = rep.predictions
    assert np.all((p["rps"] >= 0) & (p["rps"] <= 1))
