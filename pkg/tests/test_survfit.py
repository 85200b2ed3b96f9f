"""Spline basis, Kaplan-Meier, Cox and the flexible parametric PH model."""
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_dataset
from ipdsurv.cox import censoring_diagnostic, fit_cox, partial_loglik
from ipdsurv.data import center_covariates
from ipdsurv.errors import DataError, FitError
from ipdsurv.flexph import FitOptions, FlexPhModel, Likelihood, fit_flexph
from ipdsurv.km import fit_km, km_estimate
from ipdsurv.simulate import ScenarioSpec, generate, make_rng
from ipdsurv.spline import SplineBasis


# --- spline ---------------------------------------------------------------------------


def test_no_internal_knots_is_linear():
    b = SplineBasis((0.0, 3.0))
    v, dv = b.evaluate([0.5, 1.7])
    np.testing.assert_array_equal(v, [[1, 0.5], [1, 1.7]])
    np.testing.assert_array_equal(dv[:, 1], [1, 1])


def test_natural_at_boundaries_and_continuous_at_knot():
    b = SplineBasis((0.0, 4.0), (1.5,))
    h = 1e-5
    for x in (0.0, 4.0, -1.0, 5.0):
        _, d_hi = b.evaluate(x + h)
        _, d_lo = b.evaluate(x - h)
        second = (d_hi - d_lo) / (2 * h)
        assert np.max(np.abs(second[0, 2:])) < 1e-4
    # outside the boundary knots the spline is linear: second derivative exactly 0
    np.testing.assert_array_equal(b.second_derivative([-1.0, 5.0])[:, 2:], 0.0)
    left, _ = b.evaluate(1.5 - 1e-12)
    right, _ = b.evaluate(1.5 + 1e-12)
    assert np.max(np.abs(left - right)) < 1e-10


def test_derivatives_match_finite_differences():
    b = SplineBasis((-1.0, 3.0), (0.5, 1.5))
    x = np.linspace(-2, 4, 37)
    h = 1e-6
    _, dv = b.evaluate(x)
    fd = (b.evaluate(x + h)[0] - b.evaluate(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(dv, fd, atol=1e-6)
    _, d_hi = b.evaluate(x + h)
    _, d_lo = b.evaluate(x - h)
    np.testing.assert_allclose(b.second_derivative(x), (d_hi - d_lo) / (2 * h), atol=1e-5)


def test_knot_placement_and_roundtrip():
    t = np.exp([0.0, 1.0, 2.0, 5.0])
    b = SplineBasis.from_event_times(t)
    assert b.boundary_knots == (0.0, 5.0)
    assert b.internal_knots == (1.5,)
    assert SplineBasis.from_dict(b.to_dict()) == b
    with pytest.raises(FitError):
        SplineBasis((1.0, 1.0))


# --- Kaplan-Meier ------------------------------------------------------------------------


def test_km_hand_examples():
    c = km_estimate([1, 2, 3], [1, 1, 1])
    np.testing.assert_allclose(c.survival, [2 / 3, 1 / 3, 0])
    c = km_estimate([1, 2, 3], [1, 0, 1])
    assert c(1) == pytest.approx(2 / 3) and c(2.5) == pytest.approx(2 / 3) and c(3) == 0
    c = km_estimate([4, 5, 6], [0, 0, 0])
    np.testing.assert_array_equal(c.survival, 1.0)
    assert np.isnan(c.median())
    assert c(0.5) == 1.0


def test_greenwood_variance_by_hand():
    c = km_estimate([1, 2, 3, 4], [1, 1, 0, 1])
    # S(2) = 3/4 * 2/3 = 1/2; var = S^2 (1/(4*3) + 1/(3*2))
    assert c.variance[1] == pytest.approx(0.25 * (1 / 12 + 1 / 6))


def test_fit_km_group(sim3):
    d, _ = sim3
    c = fit_km(d, (0, 1))
    m = d.mask(0, 1)
    assert c.n_risk[0] == m.sum()
    with pytest.raises(DataError):
        fit_km(make_dataset([1.0], [1]), (0, 1))


# --- Cox -------------------------------------------------------------------------------


def test_cox_four_subjects_matches_brute_force():
    time = np.array([1.0, 2.0, 3.0, 4.0])
    event = np.array([1, 1, 0, 1])
    x = np.array([1.0, 0.0, 1.0, 0.0])
    res = fit_cox(time, event, x)
    # brute force: direct product of risk-set probabilities on a fine grid
    def lik(b):
        w = np.exp(b * x)
        return sum(np.log(w[i] / w[time >= time[i]].sum()) for i in range(4) if event[i])
    grid = np.linspace(-3, 3, 60001)
    best = grid[int(np.argmax([lik(b) for b in grid]))]
    assert res.coef[0] == pytest.approx(best, abs=1e-4)
    # score 1/(1 + e^b) - e^b/(2 + e^b) = 0 gives e^(2b) = 2
    assert res.coef[0] == pytest.approx(np.log(2) / 2, abs=1e-10)


def test_cox_breslow_ties_by_hand():
    time = np.array([1.0, 1.0, 2.0])
    event = np.array([1, 1, 1])
    x = np.array([1.0, 0.0, 0.0])
    b = 0.3
    ll = partial_loglik([b], time, event, x, derivatives=False)
    by_hand = (b + 0.0) - 2 * np.log(np.exp(b) + 2) + 0.0 - np.log(1.0)
    assert ll == pytest.approx(by_hand)


def test_cox_score_and_information_match_numeric():
    rng = make_rng(5)
    n = 60
    time = rng.exponential(1, n).round(1)
    event = (rng.random(n) < 0.7).astype(int)
    x = rng.normal(size=(n, 2))
    strata = np.arange(n) % 2
    beta = np.array([0.3, -0.2])
    ll, score, info = partial_loglik(beta, time, event, x, strata)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up = partial_loglik(beta + e, time, event, x, strata)
        dn = partial_loglik(beta - e, time, event, x, strata)
        assert score[j] == pytest.approx((up[0] - dn[0]) / (2 * h), rel=1e-6)
        np.testing.assert_allclose(-info[:, j], (up[1] - dn[1]) / (2 * h), rtol=1e-5)


def test_cox_monotone_likelihood_is_an_error():
    with pytest.raises(FitError):
        fit_cox([1, 2, 3, 4], [1, 1, 0, 0], [1, 1, 0, 0])
    with pytest.raises(FitError):
        fit_cox([1, 2], [0, 0], [1, 0])


def test_censoring_diagnostic_recovers_doubled_hazard():
    spec = ScenarioSpec(n=(2000,), scale=(40,), beta=(0.0, 0.0), censor_rate=(0.03,),
                        censor_coef=(0.0, np.log(2)), seed=21)
    d, _ = generate(spec)
    res = censoring_diagnostic(center_covariates(d))
    assert res.names == ("z", "x", "exposure")
    assert np.exp(res.coef[1]) == pytest.approx(2.0, abs=0.15)
    name, per, hr, lo, hi = res.hr_table({"z": 2})[0]
    assert per == 2 and lo < hr < hi


@pytest.mark.slow
def test_censoring_diagnostic_null_coverage():
    covered = 0
    for r in range(100):
        spec = ScenarioSpec(n=(300,), scale=(40,), censor_rate=(0.02,), seed=500 + r)
        d, _ = generate(spec)
        _, _, _, lo, hi = censoring_diagnostic(d).hr_table()[0]
        covered += lo <= 1 <= hi
    assert covered >= 93


def test_censoring_diagnostic_needs_censoring():
    with pytest.raises(DataError):
        censoring_diagnostic(make_dataset([1.0, 2.0], [1, 1]))


# --- flexible parametric model ---------------------------------------------------------------


def _exponential(n, rate, seed, censor=0.02):
    rng = make_rng(seed)
    t = rng.exponential(1 / rate, n)
    c = rng.exponential(1 / censor, n)
    return make_dataset(np.minimum(t, c), (t <= c).astype(int))


def test_exponential_matches_closed_form_mle():
    d = _exponential(1500, 0.05, 1)
    m = fit_flexph(d)
    lam = d.event.sum() / d.time.sum()
    t = np.quantile(d.time, np.linspace(0.1, 0.9, 9))
    s = m.predict_survival([], 0, 0, t_grid=t)
    assert np.max(np.abs(s - np.exp(-lam * t))) < 0.02


def test_weibull_slope_recovered():
    spec = ScenarioSpec(n=(2000,), shape=(1.6,), scale=(30,), beta=(0.0, 0.0), seed=4)
    d, _ = generate(spec)
    m = fit_flexph(replace(d, z=np.zeros((d.n, 0)), schema=replace(d.schema, names=(), kinds=(), offsets=())))
    x = np.linspace(np.log(5), np.log(50), 20)
    assert np.max(np.abs(m.slope(0, x) - 1.6)) < 0.1


def test_weibull_zero_knots_recovers_shape_and_scale():
    spec = ScenarioSpec(n=(3000,), shape=(0.8,), scale=(25,), beta=(0.0, 0.0), censor_rate=(0.01,), seed=8)
    d, _ = generate(spec)
    m = fit_flexph(d, FitOptions(n_internal_knots=0, covariates=False, exposure=False))
    # log H = shape * log t - shape * log scale
    shape, icpt = m.zeta[0, 1], m.zeta[0, 0]
    assert shape == pytest.approx(0.8, abs=0.05)
    assert np.exp(-icpt / shape) == pytest.approx(25, rel=0.1)


def test_stacked_identical_studies_fit_identically():
    spec = ScenarioSpec(n=(300,), beta=(0.5, 0.5), psi=(-0.3,), censor_rate=(0.01,), seed=9)
    one, _ = generate(spec)
    d = make_dataset(np.tile(one.time, 2), np.tile(one.event, 2), np.repeat([0, 1], one.n),
                     np.tile(one.exposure, 2), np.vstack([one.z, one.z]), one.schema.names, one.schema.kinds)
    m = fit_flexph(center_covariates(d))
    np.testing.assert_allclose(m.zeta[0], m.zeta[1], atol=1e-6)
    assert m.psi[0] == pytest.approx(m.psi[1], abs=1e-6)
    assert m.conditional_log_hr(0)[1] == pytest.approx(m.conditional_log_hr(1)[1], rel=1e-6)


def test_gradient_matches_finite_differences(small100):
    m = fit_flexph(small100)
    lik = Likelihood(small100, m.basis, FitOptions())
    rng = make_rng(11)
    theta0 = lik.compress(m.zeta, m.beta, m.psi)
    checked = 0
    while checked < 10:
        theta = theta0 + rng.normal(0, 0.05, theta0.size)
        if not np.isfinite(lik.loglik(theta)):
            continue
        g = lik.score(theta)
        h = 1e-6
        fd = np.array([(lik.loglik(theta + h * e) - lik.loglik(theta - h * e)) / (2 * h)
                       for e in np.eye(theta.size)])
        assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-5
        checked += 1


def test_optimum_beats_null_model(sim3, sim3_model):
    d, _ = sim3
    null = fit_flexph(d, FitOptions(covariates=False, exposure=False))
    assert sim3_model.loglik >= null.loglik
    assert sim3_model.converged and sim3_model.grad_norm < 1e-6


def test_prediction_identities(sim3_model):
    m = sim3_model
    t = np.linspace(0.5, 60, 40)
    base = np.exp(-np.exp(m.log_cumhaz_baseline(1, t)))
    if not m.has_negative_hazard(1, t[-1]):
        np.testing.assert_allclose(m.predict_survival(np.zeros(2), 0, 1, t_grid=t), base, rtol=1e-12)
    s1 = m.predict_survival(np.zeros(2), 1, 1, t_grid=t)
    s0 = m.predict_survival(np.zeros(2), 0, 1, t_grid=t)
    np.testing.assert_allclose(np.log(-np.log(s1)) - np.log(-np.log(s0)), m.psi[1], atol=1e-9)
    np.testing.assert_array_equal(m.predict_survival([0.3, 1], 1, 1, 1, t), m.predict_survival([0.3, 1], 1, 1, t_grid=t))
    assert np.all(np.diff(s1) <= 0)
    assert m.predict_survival(np.zeros(2), 0, 1, t_grid=[1e-8])[0] == pytest.approx(1.0, abs=1e-6)


def test_zero_effects_ignore_covariates(sim3_model):
    m = replace(sim3_model, beta=np.zeros(2), psi=np.zeros(3))
    t = np.linspace(1, 50, 10)
    ref = m.predict_survival([0, 0], 0, 2, t_grid=t)
    for z, e in [([1.5, 1], 1), ([-2, 0], 0)]:
        np.testing.assert_allclose(m.predict_survival(z, e, 2, t_grid=t), ref, rtol=1e-14)


def test_serialization_roundtrip(sim3_model):
    m = sim3_model
    back = FlexPhModel.from_json(m.to_json())
    assert back.model_hash() == m.model_hash()
    t = np.linspace(0, 80, 9)
    np.testing.assert_array_equal(back.predict_survival([0.1, 1], 1, 0, t_grid=t),
                                  m.predict_survival([0.1, 1], 1, 0, t_grid=t))


def test_fit_errors():
    d = make_dataset([1.0, 2.0, 3.0, 4.0], [1, 1, 0, 0], study=[0, 0, 1, 1])
    with pytest.raises(FitError, match="no events"):
        fit_flexph(d)


def test_common_psi_and_missing_exposure_level():
    spec = ScenarioSpec(n=(300, 300, 200), psi=(-0.4, -0.4, 0.0), exposure_prob=(0.5, 0.5, 0.0),
                        censor_rate=0.01, seed=13)
    d, _ = generate(spec)
    m = fit_flexph(center_covariates(d), FitOptions(common_psi=True))
    assert m.psi[0] == m.psi[1]
    assert not m.psi_free[2] and m.psi[2] == 0.0
    assert m.psi_se(0) == pytest.approx(m.psi_se(1))


def test_negative_hazard_is_clamped():
    # a hand-built model whose baseline log H turns down late
    b = SplineBasis((0.0, 4.0), (2.0,))
    zeta = np.array([[-3.0, 1.0, 0.1]])
    spec_d = make_dataset([1.0, 2.0, 30.0], [1, 1, 1])
    m = FlexPhModel(zeta=zeta, beta=np.zeros(0), psi=np.zeros(1), basis=b, schema=spec_d.schema,
                    study_labels=("S1",), tau=np.array([60.0]), loglik=0.0, converged=True,
                    min_observed_hazard=1e-3, cov=None, n_iter=0, grad_norm=0.0, psi_free=np.array([True]))
    assert m.has_negative_hazard(0, 60)
    s = m.predict_survival([], 0, 0, t_grid=np.linspace(0.1, 60, 300))
    assert np.all(np.diff(s) <= 1e-15)
