import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from ipdsurv.contrast import marginal_hr
from ipdsurv.data import administrative_censor, center_covariates
from ipdsurv.km import km_estimate
from ipdsurv.meta import MetaInput, pool
from ipdsurv.standardize import StandardizedCurve

times = st.lists(st.floats(0.01, 100, allow_nan=False), min_size=2, max_size=40)
settings.register_profile("ipdsurv", max_examples=60, deadline=None)
settings.load_profile("ipdsurv")


@given(times, st.floats(0.5, 120), st.data())
def test_censoring_is_idempotent_and_bounded(t, tau, data):
    ev = data.draw(st.lists(st.integers(0, 1), min_size=len(t), max_size=len(t)))
    d = make_dataset(np.array(t), np.array(ev))
    once = administrative_censor(d, tau)
    twice = administrative_censor(once, tau)
    np.testing.assert_array_equal(once.time, twice.time)
    np.testing.assert_array_equal(once.event, twice.event)
    assert once.time.max() <= tau
    assert not once.event[np.asarray(t) > tau].any()


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
def test_centering_roundtrip(z):
    d = make_dataset(np.ones(len(z)), np.ones(len(z), int), z=np.array(z)[:, None])
    c = center_covariates(d)
    assert abs(c.z.mean()) < 1e-9 * max(1.0, np.abs(z).max())
    np.testing.assert_allclose(c.z[:, 0] + c.schema.offsets[0], z, rtol=0, atol=1e-9)


@given(times, st.data())
def test_km_is_a_survival_function(t, data):
    ev = data.draw(st.lists(st.integers(0, 1), min_size=len(t), max_size=len(t)))
    km = km_estimate(np.array(t), np.array(ev))
    assert np.all(np.diff(km.survival) <= 0)
    assert np.all((km.survival >= 0) & (km.survival <= 1))
    assert np.all(km.variance >= 0)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2)), min_size=2, max_size=12), st.randoms())
def test_pooling_invariant_to_order_and_shift(rows, rnd):
    y = np.array([r[0] for r in rows])
    se = np.array([r[1] for r in rows])
    labels = [str(i) for i in range(len(rows))]
    base = pool(MetaInput(y, se, labels))
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    other = pool(MetaInput(y[perm], se[perm], [labels[i] for i in perm]))
    assert np.isclose(base.pooled, other.pooled, rtol=0, atol=1e-10)
    assert np.isclose(base.tau2, other.tau2, rtol=1e-9, atol=1e-12)
    assert base.ci95[0] <= base.pooled <= base.ci95[1]
    assert abs(base.weights.sum() - 1) < 1e-12 and 0 <= base.i2 <= 100
    shifted = pool(MetaInput(y + 1.5, se, labels))
    assert np.isclose(shifted.pooled, base.pooled + 1.5, rtol=0, atol=1e-9)


@given(st.floats(0.2, 5), st.floats(0.01, 0.5))
def test_marginal_hr_of_power_curves(c, rate):
    t = np.linspace(0, 10, 101)
    s0 = np.exp(-rate * t)
    mk = lambda s: StandardizedCurve("A", "S1", 0, "prop", t, s, np.zeros(t.size, bool))
    assert np.isclose(marginal_hr(mk(s0**c), mk(s0), 10), c, rtol=1e-9)
