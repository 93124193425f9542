import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import ou_cov
from vo2lgm.dataset import ModelFrame, build_frame
from vo2lgm.inference import JointSamples, sample_joint
from vo2lgm.predict import (
    CategoryThresholds,
    PredictionError,
    PredictiveDraws,
    _ou_fill,
    argmax_category,
    classify,
    high_alert,
    predict_rows,
    prediction_table,
)

TH = CategoryThresholds()


def test_log_boundaries_are_logs():
    np.testing.assert_array_equal(TH.log_boundaries, np.log([3.5, 5.0, 7.5]))
    custom = CategoryThresholds((2.0, 4.0, 9.0))
    np.testing.assert_array_equal(custom.log_boundaries, np.log([2.0, 4.0, 9.0]))


@pytest.mark.parametrize("b", [(3.5, 5.0), (5.0, 3.5, 7.5), (0.0, 1.0, 2.0)])
def test_threshold_validation(b):
    with pytest.raises(ValueError):
        CategoryThresholds(b)


def test_rest_for_small_value():
    p = classify((math.log(2.0), 1e-12))
    assert p[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("v,cat", [(3.5, 1), (5.0, 2), (7.5, 3), (3.4999, 0), (100.0, 3)])
def test_boundary_point_masses_go_up(v, cat):
    p = classify((math.log(v), 0.0))
    assert p[cat] == 1.0 and p.sum() == 1.0
    assert TH.category_of(v) == cat


def test_boundary_symmetric_split():
    sd = 0.05
    p = classify((math.log(5.0), sd**2))
    assert p[1] == pytest.approx(p[2], abs=1e-6)
    cuts = np.log([3.5, 5.0, 7.5])
    want = np.diff(np.r_[0.0, stats.norm.cdf(cuts, math.log(5.0), sd), 1.0])
    np.testing.assert_allclose(p, want, atol=1e-12)


def test_classify_averages_draws():
    m = np.array([math.log(2.0), math.log(6.0)])
    v = np.array([0.01, 0.02])
    p = classify((m, v))
    a = classify((m[0], v[0]))
    b = classify((m[1], v[1]))
    np.testing.assert_allclose(p, 0.5 * (a + b), atol=1e-15)


@given(st.integers(0, 2**31))
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(1.5, 1.0, size=(20, 30))
    v = rng.exponential(0.2, size=(20, 30))
    v[rng.random(v.shape) < 0.1] = 0.0
    p = classify((m, v))
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_monotone_under_mean_shift(seed, shift):
    rng = np.random.default_rng(seed)
    m = rng.normal(1.5, 0.8, size=50)
    v = rng.exponential(0.1, size=50)
    p0 = classify((m, v))
    p1 = classify((m + shift, v))
    assert p1[3] >= p0[3] - 1e-12 and p1[0] <= p0[0] + 1e-12


def test_chunking_does_not_change_result():
    rng = np.random.default_rng(3)
    m = rng.normal(1.5, 1, (37, 11))
    v = rng.exponential(0.1, (37, 11))
    np.testing.assert_array_equal(classify((m, v), chunk=5), classify((m, v), chunk=1000))


@pytest.mark.parametrize(
    "p,cat", [((0.7, 0.2, 0.1, 0.0), 0), ((0.5, 0.5, 0, 0), 1), ((0.25, 0.25, 0.25, 0.25), 3), ((0, 0.3, 0.3, 0.4), 3)]
)
def test_argmax_examples(p, cat):
    assert argmax_category(np.array(p)) == cat


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4).filter(lambda w: sum(w) > 0), st.floats(0.01, 100))
def test_argmax_scale_invariant(w, c):
    w = np.array(w)
    assert argmax_category(w / w.sum()) == argmax_category(c * w / (c * w).sum())


def test_high_alert_examples():
    assert high_alert(np.array([0.25, 0.25, 0.25, 0.25]))
    assert high_alert(np.array([0.3, 0.3, 0.2, 0.2]), 0.20)
    assert not high_alert(np.array([1.0, 0, 0, 0]), 0.01)
    with pytest.raises(ValueError):
        high_alert(np.array([0, 0, 0, 1.0]), 1.0)


# predictive draws from a fit


def _at_means_frame(fit, n=3):
    p = len(fit.layout.terms)
    X = np.zeros((n, p))
    X[:, 0] = 1.0
    return ModelFrame(X=X, terms=fit.layout.terms, y=None, t=np.arange(1.0, n + 1), session_index=np.zeros(n, int),
                      patient_index=np.zeros(n, int), session_ids=("new-s",), patient_ids=("new-p",),
                      session_patient=np.zeros(1, int), centering=dict(fit.centering))


def test_new_patient_at_centering_means(small_fit):
    fr = _at_means_frame(small_fit)
    s = sample_joint(small_fit, 200, seed=1, include_ou=False)
    d = predict_rows(small_fit, fr, "new_patient", samples=s)
    th = s.theta
    np.testing.assert_allclose(d.mean[0], s.latent[:, 0] + small_fit.centering["log_vo2"], rtol=1e-14)
    np.testing.assert_allclose(d.var[0], 1 / th[:, 0] + 1 / th[:, 2], rtol=1e-14)


def test_degenerate_precisions_collapse_to_fixed_line(small_fit, small_sim):
    fr = build_frame(small_sim[0], centering=small_fit.centering)
    s = sample_joint(small_fit, 20, seed=2, include_ou=False)
    big = JointSamples(s.grid_index, np.full_like(s.psi, math.log(1e14)), s.latent)
    d = predict_rows(small_fit, fr, "new_patient", samples=big)
    line = fr.X @ s.latent[:, : fr.X.shape[1]].T + small_fit.centering["log_vo2"]
    np.testing.assert_allclose(d.mean, line, rtol=1e-14)
    assert d.var.max() < 1e-12


def test_new_patient_nested_monte_carlo(small_fit, small_sim):
    ds, _ = small_sim
    pid = ds.patient_ids[0]
    sub = ds.subset(ds.breaths["patient_id"] == pid)
    fr = build_frame(sub, centering=small_fit.centering)
    rows = [0, 17, 59]
    n = 4000
    s = sample_joint(small_fit, n, seed=8, include_ou=False)
    d = predict_rows(small_fit, fr, "new_patient", samples=s)
    rng = np.random.default_rng(99)
    th = s.theta
    for r in rows:
        beta = s.latent[:, : fr.X.shape[1]]
        a = rng.standard_normal(n) / np.sqrt(th[:, 0])
        b = rng.standard_normal(n) / np.sqrt(th[:, 1])
        ou = rng.standard_normal(n) / np.sqrt(th[:, 2])
        eta = beta @ fr.X[r] + a + fr.X[r, 1] * b + ou + small_fit.centering["log_vo2"]
        m_mix = d.mean[r].mean()
        v_mix = np.mean(d.var[r] + (d.mean[r] - m_mix) ** 2)
        se_m = math.sqrt(v_mix / n)
        assert abs(eta.mean() - m_mix) < 3 * se_m + 1e-12
        # sd of a sample variance is about v * sqrt(2 / n) for near-Gaussian data
        assert abs(eta.var() - v_mix) < 3 * v_mix * math.sqrt(2 / n) * 1.5


def test_new_session_uses_patient_slope(small_fit, small_sim):
    ds, _ = small_sim
    fr = build_frame(ds, centering=small_fit.centering)
    s = sample_joint(small_fit, 50, seed=4, include_ou=False)
    d = predict_rows(small_fit, fr, "new_session", samples=s)
    lay = small_fit.layout
    slopes = s.latent[:, lay.patients]
    r = 5
    pidx = fr.patient_index[r]
    want = fr.X[r] @ s.latent[:, : lay.n_fixed].T + fr.X[r, 1] * slopes[:, pidx] + small_fit.centering["log_vo2"]
    np.testing.assert_allclose(d.mean[r], want, rtol=1e-13)
    np.testing.assert_allclose(d.var[r], 1 / s.theta[:, 0] + 1 / s.theta[:, 2], rtol=1e-14)


def test_new_session_unknown_patient(small_fit):
    with pytest.raises(PredictionError, match="new-p"):
        predict_rows(small_fit, _at_means_frame(small_fit), "new_session", n=10)


def test_centering_mismatch(small_fit):
    fr = _at_means_frame(small_fit)
    bad = dict(fr.centering)
    bad["log_vt"] += 0.1
    with pytest.raises(PredictionError, match="centering"):
        predict_rows(small_fit, ModelFrame(**{**fr.__dict__, "centering": bad}), n=10)


def test_unknown_mode(small_fit):
    with pytest.raises(ValueError):
        predict_rows(small_fit, _at_means_frame(small_fit), "later", n=10)


def test_in_sample_at_fitted_rows(small_fit, small_sim):
    ds, _ = small_sim
    fr = build_frame(ds, centering=small_fit.centering)
    s = sample_joint(small_fit, 30, seed=6, include_ou=True)
    d = predict_rows(small_fit, fr, "in_sample", samples=s)
    from vo2lgm.lgm import design_matrix

    eta = design_matrix(fr, small_fit.layout) @ s.latent.T
    np.testing.assert_allclose(d.mean, eta + small_fit.centering["log_vo2"], rtol=1e-12, atol=1e-12)
    assert np.all(d.var == 1.0 / small_fit.priors.obs_precision)


def test_ou_fill_matches_dense_conditioning():
    rng = np.random.default_rng(0)
    t_fit = np.cumsum(rng.uniform(1, 4, 8))
    t_new = np.array([0.3, t_fit[2] + 0.7, t_fit[5] + 1.1, t_fit[-1] + 5.0])
    phi, tau_s = 0.15, 30.0
    s_fit = rng.standard_normal((8, 1)) / math.sqrt(tau_s)
    m, v = _ou_fill(t_new, t_fit, s_fit, np.array([phi]), np.array([tau_s]))
    for r, t in enumerate(t_new):
        K = ou_cov(np.r_[t_fit, t], phi, tau_s)
        Kff, kf = K[:-1, :-1], K[:-1, -1]
        want_m = kf @ np.linalg.solve(Kff, s_fit[:, 0])
        want_v = K[-1, -1] - kf @ np.linalg.solve(Kff, kf)
        assert m[r, 0] == pytest.approx(want_m, rel=1e-8, abs=1e-12)
        assert v[r, 0] == pytest.approx(want_v, rel=1e-8)


def test_prediction_table_columns(small_fit):
    fr = _at_means_frame(small_fit)
    d = predict_rows(small_fit, fr, n=50)
    tab = prediction_table(fr, d)
    assert list(tab.columns) == ["patient_id", "session_id", "t", "pred_mean_log_vo2", "pred_sd_log_vo2", "p_rest",
                                 "p_low", "p_medium", "p_high", "category", "high_alert"]
    np.testing.assert_allclose(tab[["p_rest", "p_low", "p_medium", "p_high"]].sum(axis=1), 1.0, atol=1e-12)


def test_predict_determinism(small_fit):
    fr = _at_means_frame(small_fit)
    a = predict_rows(small_fit, fr, n=100, seed=3)
    b = predict_rows(small_fit, fr, n=100, seed=3)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)


def test_interval_contains_mean():
    d = PredictiveDraws(mean=np.array([[1.0, 1.2, 0.8]]), var=np.array([[0.01, 0.02, 0.01]]))
    lo, hi = d.interval()
    assert lo[0] < d.summary_mean()[0] < hi[0]
