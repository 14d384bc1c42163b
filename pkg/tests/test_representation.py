import math

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize
from hypothesis import given, settings, strategies as st

from matchml.data import Dataset
from matchml.matching import build_index
from matchml.representation import (
    PRESETS,
    FitError,
    Representation,
    SeparationError,
    fit_prognostic,
    fit_propensity,
    fit_propensity_representation,
    logistic_irls,
    make_diagonal,
    make_identity,
    preset_for,
    resolve_preset,
    ridge_fit,
)


def _arm_data(x, y):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    X = x.reshape(n, -1)
    T = np.array([1] * n + [2] * n)
    return Dataset(np.vstack([X, X]), np.concatenate([np.asarray(y, float), np.zeros(n)]), T,
                   n_levels=2)


class TestRidge:
    def test_exact_linear(self):
        x = np.arange(6.0)
        ds = _arm_data(x, 2 * x + 1)
        rep = fit_prognostic(ds, arms=1)
        np.testing.assert_allclose(rep.coefficients[1], [1.0, 2.0], atol=1e-8)
        assert rep.apply([3.0])[0] == pytest.approx(7.0, abs=1e-8)

    def test_large_penalty_limit(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(40, 3))
        y = X @ [1.0, -2.0, 3.0] + 4.0
        beta = ridge_fit(X, y, lam=1e12)
        assert np.all(np.abs(beta[1:]) < 1e-8)
        assert beta[0] == pytest.approx(y.mean(), abs=1e-6)

    def test_normal_equation_oracle(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        lam = 0.1
        # augmented least squares: independent of the normal-equation solve
        Z = np.column_stack([np.ones(50), X])
        aug = np.vstack([Z, np.sqrt(lam) * np.eye(4)[1:]])
        rhs = np.concatenate([y, np.zeros(3)])
        oracle = scipy.linalg.lstsq(aug, rhs)[0]
        np.testing.assert_allclose(ridge_fit(X, y, lam), oracle, rtol=1e-10, atol=1e-12)

    def test_rank_deficient(self):
        X = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
        with pytest.raises(FitError, match="lam > 0"):
            ridge_fit(X, np.arange(5.0), 0.0)
        ridge_fit(X, np.arange(5.0), 0.5)

    def test_too_few_units(self):
        ds = _arm_data(np.arange(2.0), np.arange(2.0))
        with pytest.raises(FitError, match="p \\+ 2"):
            fit_prognostic(ds, arms=1)

    def test_noiseless_linear_exact(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 4))
        beta = np.array([0.5, -1.0, 2.0, 3.0])
        T = np.repeat([1, 2], 30)
        y = X @ beta + 5.0 * (T == 2)
        ds = Dataset(X, y, T, n_levels=2)
        rep = fit_prognostic(ds, arms=(2, 1))
        Xq = rng.normal(size=(20, 4))
        np.testing.assert_allclose(rep.transform(Xq, arm=2).ravel(), Xq @ beta + 5.0, atol=1e-8)
        np.testing.assert_allclose(rep.transform(Xq, arm=1).ravel(), Xq @ beta, atol=1e-8)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 2))
        T = np.repeat([1, 2], 20)
        y = rng.normal(size=40)
        ds = Dataset(X, y, T, n_levels=2)
        a = fit_prognostic(ds, arms=(1, 2))
        perm = rng.permutation(40)
        b = fit_prognostic(Dataset(X[perm], y[perm], T[perm], n_levels=2), arms=(1, 2))
        np.testing.assert_allclose(a.transform(X), b.transform(X), rtol=1e-10, atol=1e-12)


def _neg_loglik(beta, Z, z):
    eta = Z @ beta
    return np.sum(np.logaddexp(0.0, eta) - z * eta)


class TestPropensity:
    def test_class_rate(self):
        rng = np.random.default_rng(4)
        n = 2000
        X = rng.normal(size=(n, 2))
        T = 1 + (rng.uniform(size=n) < 0.3)
        ds = Dataset(X, np.zeros(n), T, n_levels=2)
        pm = fit_propensity(ds)
        rate = np.mean(T == 2)
        e = pm.predict(X, 2)
        # the intercept score equation forces mean(e) = rate at the optimum
        assert abs(e.mean() - rate) < 1e-6
        assert np.median(np.abs(e - rate)) < 0.02

    def test_matches_direct_likelihood_optimum(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(300, 2))
        z = (rng.uniform(size=300) < 1 / (1 + np.exp(-(0.3 + X @ [1.0, -0.5])))).astype(float)
        beta, conv, _ = logistic_irls(X, z)
        Z = np.column_stack([np.ones(300), X])
        ref = scipy.optimize.minimize(_neg_loglik, np.zeros(3), args=(Z, z), method="BFGS",
                                      options={"gtol": 1e-10}).x
        assert conv
        np.testing.assert_allclose(beta, ref, atol=1e-5)

    def test_separation(self):
        X = np.arange(10.0)[:, None]
        T = np.where(X[:, 0] < 5, 1, 2)
        ds = Dataset(X, np.zeros(10), T, n_levels=2)
        with pytest.raises(SeparationError):
            fit_propensity(ds)

    def test_clip(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(200, 1)) * 3
        T = 1 + (rng.uniform(size=200) < 1 / (1 + np.exp(-4 * X[:, 0])))
        pm = fit_propensity(Dataset(X, np.zeros(200), T, n_levels=2), clip=0.01)
        e = pm.predict(np.linspace(-20, 20, 50)[:, None], 2)
        assert e.min() >= 0.01 and e.max() <= 0.99
        assert e.min() == 0.01 and e.max() == 0.99

    def test_two_levels_sum_to_one(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(100, 2))
        T = 1 + (rng.uniform(size=100) < 0.5)
        pm = fit_propensity(Dataset(X, np.zeros(100), T, n_levels=2))
        np.testing.assert_array_equal(pm.predict_raw(X, 1) + pm.predict_raw(X, 2),
                                      np.ones(100) * (pm.predict_raw(X, 1) + pm.predict_raw(X, 2)))
        np.testing.assert_allclose(pm.predict_raw(X, 1) + pm.predict_raw(X, 2), 1.0, atol=1e-15)

    def test_monotone_in_index(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(150, 2))
        T = 1 + (rng.uniform(size=150) < 1 / (1 + np.exp(-X[:, 0])))
        pm = fit_propensity(Dataset(X, np.zeros(150), T, n_levels=2))
        Q = rng.normal(size=(100, 2))
        idx = np.column_stack([np.ones(100), Q]) @ pm.coefficients[2]
        e = pm.predict_raw(Q, 2)
        order = np.argsort(idx)
        assert np.all(np.diff(e[order]) >= 0)

    def test_representation_range(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(100, 2))
        T = 1 + (rng.uniform(size=100) < 0.5)
        rep = fit_propensity_representation(Dataset(X, np.zeros(100), T, n_levels=2), clip=0.05)
        v = rep.transform(rng.normal(size=(30, 2)) * 50)
        assert v.shape == (30, 1) and v.min() >= 0.05 and v.max() <= 0.95


class TestSimpleRepresentations:
    def test_identity(self):
        np.testing.assert_array_equal(make_identity(2).apply([1.0, 2.0]), [1.0, 2.0])

    def test_diagonal(self):
        np.testing.assert_array_equal(make_diagonal([0.5, 0.25]).apply([2.0, 4.0]), [1.0, 1.0])

    @pytest.mark.parametrize("w", [[1.0, 0.0], [-1.0, 1.0], [np.inf, 1.0]])
    def test_bad_weights(self, w):
        with pytest.raises(ValueError):
            make_diagonal(w)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_identity(3).apply([1.0, 2.0])

    def test_cem_emulation(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(20, 3))
        gam = np.array([0.5, 1.0, 0.8])
        rep = make_diagonal(1.0 / gam)
        E = rep.transform(X)
        idx = build_index(E, np.ones(20, dtype=int))
        for qi in range(20):
            got = idx.caliper(E[qi], 1, 1.0, q=math.inf).members
            want = np.flatnonzero(np.all(np.abs(X - X[qi]) <= gam, axis=1))
            np.testing.assert_array_equal(got, want)

    def test_batch_equals_rowwise(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(40, 2))
        T = np.repeat([1, 2], 20)
        rep = fit_prognostic(Dataset(X, X[:, 0] + rng.normal(size=40), T, n_levels=2), arms=(1, 2))
        batch = rep.transform(X)
        rows = np.array([rep.apply(x) for x in X])
        np.testing.assert_array_equal(batch, rows)

    def test_output_dims(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(40, 3))
        T = np.repeat([1, 2], 20)
        ds = Dataset(X, rng.normal(size=40), T, n_levels=2)
        assert make_identity(3).d == 3
        assert make_diagonal([1, 2, 3]).d == 3
        assert fit_prognostic(ds, arms=1).d == 1
        two = fit_prognostic(ds, arms=(1, 2))
        assert two.d == 2 and two.output_dim(1) == 1
        assert fit_propensity_representation(ds).d == 1


class TestSerialization:
    def test_json_round_trip_bit_exact(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(60, 3))
        T = np.repeat([1, 2], 30)
        ds = Dataset(X, rng.normal(size=60) * 1e3, T, n_levels=2)
        for rep in (fit_prognostic(ds, arms=(2, 1)), fit_propensity_representation(ds),
                    make_diagonal(rng.uniform(0.1, 2, 3)), make_identity(3)):
            back = Representation.from_json(rep.to_json())
            Q = rng.normal(size=(10, 3))
            assert back.transform(Q).tobytes() == rep.transform(Q).tobytes()
            assert back.to_json() == rep.to_json()


class TestPresets:
    def test_table(self):
        assert PRESETS == {
            "nearest-neighbor": ("identity", 2),
            "propensity-match": ("propensity-score", 1),
            "prognostic-match": ("prognostic", 1),
            "cem": ("diagonal", math.inf),
            "mahalanobis": ("diagonal", 2),
        }

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_round_trip(self, name):
        assert preset_for(*PRESETS[name]) == name

    def test_aliases(self):
        assert resolve_preset("prognostic") == "prognostic-match"
        with pytest.raises(KeyError):
            resolve_preset("malts")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4), st.integers(0, 1000))
def test_transform_is_finite(x, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 4))
    T = np.repeat([1, 2], 15)
    ds = Dataset(X, rng.normal(size=30), T, n_levels=2)
    for rep in (fit_prognostic(ds, arms=(1, 2)), fit_propensity_representation(ds),
                make_identity(4), make_diagonal([1, 2, 3, 4])):
        assert np.all(np.isfinite(rep.apply(np.array(x))))
