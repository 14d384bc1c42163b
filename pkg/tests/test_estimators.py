import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matchml.data import Dataset, split
from matchml.estimators import (
    ArmConfig,
    EmptyMatchedGroup,
    MatchedML,
    auto_k,
    ball_volume,
    cate_estimate,
    cate_from_crf,
    corrected_mean,
    crf_estimate,
    normal_quantile,
    z_value,
)
from matchml.matching import MatchedGroup, build_index
from matchml.representation import fit_prognostic
from matchml.simulation import gen_linear


def group(idx, mode="knn", gamma=1.0):
    idx = np.asarray(idx, dtype=np.int64)
    return MatchedGroup(np.zeros(1), 1, idx, np.zeros(idx.size), gamma, mode)


def mc_ball_volume(d, q, n=10**6, seed=0):
    rng = np.random.default_rng(seed)
    U = rng.uniform(-1.0, 1.0, size=(n, d))
    inside = np.sum(np.abs(U) ** q, axis=1) <= 1.0
    return 2.0 ** d * inside.mean()


class TestCrf:
    def test_three_points(self):
        est = crf_estimate(group([0, 1, 2]), [1.0, 2.0, 3.0])
        assert est.value == 2.0 and est.corrected == 1.5
        assert est.variance == pytest.approx(2 / 3, rel=1e-15)

    def test_constant(self):
        est = crf_estimate(group([0, 1]), [5.0, 5.0])
        assert est.value == 5.0 and est.variance == 0.0

    def test_empty_caliper(self):
        with pytest.raises(EmptyMatchedGroup, match="larger"):
            crf_estimate(group([], mode="caliper"), [1.0])
        assert corrected_mean(group([], mode="caliper"), [1.0]) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.integers(0, 1000))
    def test_properties(self, ys, seed):
        y = np.array(ys)
        n = y.size
        est = crf_estimate(group(np.arange(n)), y)
        assert y.min() - 1e-9 <= est.value <= y.max() + 1e-9
        assert est.corrected == pytest.approx(est.value * n / (n + 1), rel=1e-12, abs=1e-9)
        perm = np.random.default_rng(seed).permutation(n)
        assert crf_estimate(group(perm), y).value == pytest.approx(est.value, rel=1e-12, abs=1e-9)
        y2 = np.append(y, est.value)
        est2 = crf_estimate(group(np.arange(n + 1)), y2)
        assert est2.value == pytest.approx(est.value, rel=1e-12, abs=1e-9)
        assert est2.variance <= est.variance * (1 + 1e-12) + 1e-9


class TestCate:
    def test_noiseless_degenerate(self):
        a = crf_estimate(group([0, 1]), [7.0, 7.0, 2.0, 2.0])
        b = crf_estimate(group([2, 3]), [7.0, 7.0, 2.0, 2.0])
        c = cate_from_crf(a, b)
        assert c.tau == 5.0 and c.width == 0.0 and c.degenerate

    def test_closed_form(self):
        y = np.array([0.0, 2.0, 0.0, 2.0, 10.0, 12.0, 10.0, 12.0])
        a = crf_estimate(group([0, 1, 2, 3]), y)
        b = crf_estimate(group([4, 5, 6, 7]), y)
        assert a.variance == 1.0 and b.variance == 1.0
        c = cate_from_crf(a, b, 0.05)
        assert c.se == pytest.approx(math.sqrt(0.5), rel=1e-15)
        assert c.width / 2 == pytest.approx(1.3859, abs=1e-4)
        assert c.width == pytest.approx(2 * z_value(0.05) * c.se, rel=1e-15)
        assert c.ci_low <= c.tau <= c.ci_high

    def test_knn_uses_k(self):
        # caliper mode divides by N, KNN by k; equal when the group has k members
        y = np.arange(6.0)
        knn = crf_estimate(group([0, 1, 2]), y)
        cal = crf_estimate(group([0, 1, 2], mode="caliper", gamma=0.5), y)
        assert knn.effective_size == 3 and cal.effective_size == 3
        assert knn.param == 3 and cal.param == 0.5

    def test_width_decreases_in_k(self):
        widths = []
        for k in (2, 4, 8, 16):
            y = np.tile([0.0, 2.0], k)
            est = crf_estimate(group(np.arange(k)), y)
            widths.append(cate_from_crf(est, est).width)
        assert all(a > b for a, b in zip(widths, widths[1:]))

    def test_cate_estimate_wiring(self):
        E = np.array([0.0, 0.1, 0.2, 5.0, 5.1, 5.2])
        T = np.array([2, 2, 2, 1, 1, 1])
        y = np.array([10.0, 11.0, 12.0, 1.0, 2.0, 3.0])
        idx = build_index(E, T)
        c = cate_estimate([0.0], 2, 1, ArmConfig("knn", k=3), idx, y)
        assert c.tau == 9.0

    def test_cate_estimate_empty(self):
        idx = build_index([0.0, 10.0], [1, 2])
        with pytest.raises(EmptyMatchedGroup):
            cate_estimate([0.0], 2, 1, ArmConfig("caliper", gamma=1.0), idx, [0.0, 1.0])

    def test_auto_k(self):
        assert auto_k(100) == 10 and auto_k(99) == 9 and auto_k(0) == 1


class TestNormalQuantile:
    def test_median(self):
        assert normal_quantile(0.5) == 0.0

    def test_975(self):
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_antisymmetry(self):
        # 1 - 0.975 is not exactly 0.025 in binary, hence the tolerance
        assert normal_quantile(0.025) == pytest.approx(-normal_quantile(0.975), abs=1e-12)
        assert normal_quantile(0.25) == -normal_quantile(0.75)

    @pytest.mark.parametrize("a", [1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.3, 0.7, 0.97575, 0.999, 1 - 1e-9])
    def test_high_precision_reference(self, a):
        mpmath.mp.dps = 40
        ref = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(a) - 1))
        assert abs(normal_quantile(a) - ref) < 1e-8 * max(1.0, abs(ref))

    @pytest.mark.parametrize("a", [0.0, 1.0, -0.1, 1.5])
    def test_range(self, a):
        with pytest.raises(ValueError):
            normal_quantile(a)


class TestBallVolume:
    def test_l1_diamond(self):
        assert ball_volume(2, 1) == pytest.approx(2.0, rel=1e-14)

    def test_cube(self):
        assert ball_volume(3, math.inf) == 8.0

    @pytest.mark.parametrize("d,q", [(2, 2), (3, 2), (2, 1), (3, 3)])
    def test_monte_carlo(self, d, q):
        assert ball_volume(d, q) == pytest.approx(mc_ball_volume(d, q), rel=0.02)

    def test_closed_forms(self):
        assert ball_volume(2, 2) == pytest.approx(math.pi, rel=1e-14)
        assert ball_volume(3, 2) == pytest.approx(4 * math.pi / 3, rel=1e-14)

    @pytest.mark.parametrize("d", range(3, 15))
    def test_recursion(self, d):
        assert ball_volume(d, 2) == pytest.approx(ball_volume(d - 2, 2) * 2 * math.pi / d, rel=1e-10)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ball_volume(0, 2)
        with pytest.raises(ValueError):
            ball_volume(2, 0.5)


class TestMatchedML:
    def test_noiseless_exact(self):
        g = np.arange(4.0)
        X = np.array([(a, b) for a in g for b in g] * 200)
        T = np.random.default_rng(0).integers(1, 3, X.shape[0])
        beta = np.array([1.0, 10.0])
        y = X @ beta + 5.0 * (T == 2)
        ds = Dataset(X, y, T, n_levels=2)
        plan = split(ds, 0.25, 0)
        rep = fit_prognostic(ds, plan.train_indices, arms=(2, 1))
        m = plan.match_indices
        est = MatchedML(rep, q=1, k="auto").fit(X[m], y[m], T[m])
        Xq = np.array([(a, b) for a in g for b in g])
        tau, se, lo, hi = est.cate_batch(Xq, 2, 1)
        np.testing.assert_allclose(tau, 5.0, atol=1e-6)
        assert np.all(se == 0.0)
        for x in Xq:
            c = est.cate(x, 2, 1)
            assert abs(c.tau - 5.0) < 1e-6 and c.crf_t.variance == 0.0

    def test_batch_matches_single(self):
        sim = gen_linear(600, [1.0, -1.0], seed=1)
        ds = sim.dataset
        rep = fit_prognostic(ds, np.arange(200), arms=(2, 1))
        est = MatchedML(rep, q=1, k="auto").fit(ds.covariates[200:], ds.outcomes[200:],
                                                ds.treatments[200:])
        Xq = np.random.default_rng(2).normal(size=(50, 2))
        tau, se, lo, hi = est.cate_batch(Xq, 2, 1)
        for j, x in enumerate(Xq):
            c = est.cate(x, 2, 1)
            assert c.tau == pytest.approx(tau[j], abs=1e-12)
            assert c.se == pytest.approx(se[j], abs=1e-12)

    def test_caliper_mode(self):
        sim = gen_linear(400, [1.0], seed=3)
        ds = sim.dataset
        est = MatchedML(None, caliper=0.3).fit(ds.covariates, ds.outcomes, ds.treatments)
        c = est.cate(np.array([0.0]), 2, 1)
        assert c.crf_t.n_matched > 0 and c.crf_t.mode == "caliper"
        with pytest.raises(EmptyMatchedGroup):
            est.crf(np.array([50.0]), 2)

    def test_linear_dgp_versus_true_mu_oracle(self):
        beta = np.array([1.0, -2.0, 0.5])
        sim = gen_linear(5000, beta, tau=5.0, noise=1.0, seed=4)
        ds = sim.dataset
        plan = split(ds, 0.25, 5)
        rep = fit_prognostic(ds, plan.train_indices, arms=(2, 1))
        m = plan.match_indices
        X, y, T = ds.covariates[m], ds.outcomes[m], ds.treatments[m]
        est = MatchedML(rep, q=1, k="auto").fit(X, y, T)
        Xq = np.random.default_rng(6).normal(size=(200, 3))
        tau_hat = est.cate_batch(Xq, 2, 1)[0]
        mae = np.mean(np.abs(tau_hat - 5.0))

        # oracle: brute-force KNN on the true conditional mean, same k per arm
        oracle = []
        mu_true = X @ beta
        for x in Xq:
            means = []
            for arm in (2, 1):
                pool = np.flatnonzero(T == arm)
                k = auto_k(pool.size)
                d = np.abs(mu_true[pool] - x @ beta)
                nn = pool[np.lexsort((pool, d))[:k]]
                means.append(y[nn].mean())
            oracle.append(means[0] - means[1])
        mae_oracle = np.mean(np.abs(np.array(oracle) - 5.0))
        assert mae <= 1.1 * mae_oracle
