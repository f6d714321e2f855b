import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omtfdr import policy as P
from omtfdr.locfdr import LocFdrVector, locfdr_batch
from omtfdr.model import TwoGroupModel, sample_batch
from omtfdr.policy import CalibratedPolicy, CalibrationError, CalibrationSet, Criterion


def vec(values):
    return LocFdrVector.from_values(values)


class TestCriterion:
    @pytest.mark.parametrize("s,c", [("fdr", Criterion.FDR), ("pFDR", Criterion.PFDR), ("MFDR", Criterion.MFDR)])
    def test_parse(self, s, c):
        assert Criterion.parse(s) is c

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            Criterion.parse("fwer")


class TestCoefficients:
    def test_worked_example(self):
        co = P.coefficients([0.1, 0.4], "fdr", 0.05)
        np.testing.assert_allclose(co.a, [0.9, 0.6])
        np.testing.assert_allclose(co.b, [0.1, 0.15])
        assert co.c_err == 0.05

    def test_pfdr_first_coefficient(self):
        co = P.coefficients([0.05, 0.3], "pfdr", 0.05)
        assert co.b[0] == 0.0
        assert co.c_err == 0.0

    def test_zero_spread(self):
        co = P.coefficients(np.full(6, 0.3), "fdr", 0.1)
        np.testing.assert_array_equal(co.b[1:], 0.0)

    def test_unsorted(self):
        with pytest.raises(ValueError, match="sorted"):
            P.coefficients([0.4, 0.1], "fdr", 0.05)

    def test_mfdr_not_used(self):
        with pytest.raises(ValueError):
            P.coefficients([0.1], "mfdr", 0.05)


class TestStepDown:
    def test_mu_zero_rejects_all(self):
        tr = P.step_down_decide(vec([0.2, 0.99, 0.5]), 0.0, 0.05, "fdr")
        np.testing.assert_array_equal(tr.d, [1, 1, 1])

    def test_worked_example_reject(self):
        tr = P.step_down_decide(vec([0.1, 0.4]), 3.0, 0.05, "fdr")
        np.testing.assert_allclose(tr.r, [0.6, 0.15])
        np.testing.assert_allclose(tr.m, [0.75, 0.15])
        np.testing.assert_array_equal(tr.d_sorted, [1, 1])

    def test_worked_example_accept(self):
        tr = P.step_down_decide(vec([0.3, 0.9]), 3.0, 0.05, "fdr")
        np.testing.assert_allclose(tr.r, [-0.2, -0.8])
        np.testing.assert_array_equal(tr.m, [0.0, 0.0])
        np.testing.assert_array_equal(tr.d_sorted, [0, 0])

    def test_pull_back(self):
        tr = P.step_down_decide(vec([0.4, 0.1]), 3.0, 0.05, "fdr")
        np.testing.assert_array_equal(tr.d, [1, 1])
        tr = P.step_down_decide(vec([0.95, 0.01, 0.9]), 5.0, 0.05, "fdr")
        assert tr.d[1] == 1 and tr.d[0] == 0

    @pytest.mark.parametrize("t,mu", [(0.3, 2.0), (0.8, 2.0), (0.5, 1.0)])
    def test_k1_naive(self, t, mu):
        tr = P.step_down_decide_naive(vec([t]), mu, 0.05, "fdr")
        assert tr.d_sorted[0] == int((1 - t) - mu * t > 0)

    def test_negative_mu(self):
        with pytest.raises(ValueError):
            P.step_down_decide(vec([0.1]), -1.0, 0.05, "fdr")

    def test_trace_invariants(self, rng):
        for _ in range(200):
            t = vec(rng.uniform(size=30) ** 2)
            tr = P.step_down_decide(t, rng.exponential(20), 0.1, "pfdr")
            assert np.all(np.diff(tr.d_sorted.astype(int)) <= 0)
            assert np.all(tr.m[tr.d_sorted == 1] > 0)

    def test_monotone_in_mu(self, rng):
        grid = np.r_[0.0, np.geomspace(0.01, 1e4, 60)]
        for _ in range(100):
            t = vec(rng.beta(0.5, 0.5, size=int(rng.integers(1, 60))))
            crit = rng.choice(["fdr", "pfdr"])
            counts = [P.step_down_decide_naive(t, mu, 0.05, crit).d.sum() for mu in grid]
            assert np.all(np.diff(counts) <= 0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=80), st.floats(0, 500), st.floats(0.001, 0.5),
       st.sampled_from(["fdr", "pfdr"]))
def test_fast_equals_naive(values, mu, alpha, crit):
    t = vec(values)
    fast = P.step_down_decide(t, mu, alpha, crit)
    slow = P.step_down_decide_naive(t, mu, alpha, crit)
    np.testing.assert_array_equal(fast.d_sorted, slow.d_sorted)
    np.testing.assert_array_equal(fast.d, slow.d)


class TestConstraintValue:
    def test_empty(self):
        assert P.constraint_value(vec([0.1, 0.4]), [0, 0], "fdr", 0.05) == 0.0
        assert P.constraint_value(vec([0.1, 0.4]), [0, 0], "pfdr", 0.05) == 0.0

    def test_reject_one(self):
        assert P.constraint_value(vec([0.1, 0.4]), [1, 0], "fdr", 0.05) == pytest.approx(0.1, abs=1e-15)

    def test_reject_all(self):
        t = np.array([0.05, 0.2, 0.3, 0.61])
        assert P.constraint_value(t, np.ones(4), "fdr", 0.05) == pytest.approx(t.mean(), abs=1e-15)
        assert P.constraint_value(t, np.ones(4), "pfdr", 0.05) == pytest.approx(t.mean() - 0.05, abs=1e-15)

    def test_not_prefix(self):
        with pytest.raises(ValueError):
            P.constraint_value(vec([0.1, 0.4]), [0, 1], "fdr", 0.05)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=100), st.integers(0, 100))
    def test_telescoping(self, values, r):
        t = vec(values)
        r = min(r, len(values))
        d_sorted = (np.arange(len(values)) < r).astype(np.int8)
        d = np.zeros(len(values), np.int8)
        d[t.sort_perm] = d_sorted
        assert P.constraint_value(t, d_sorted, "fdr", 0.05) == pytest.approx(P.posterior_fdp(t, d), abs=1e-12)


@pytest.fixture(scope="module")
def model():
    return TwoGroupModel.iid(200, 0.2, -2.0)


class TestCalibration:
    def test_slack_constraint(self, model):
        p = P.calibrate_mu(model, 0.95, "fdr", n_cal=1000, rng=1)
        assert p.scalar == 0.0
        assert p.diagnostics.g_hat <= 0.95

    @pytest.mark.parametrize("crit", ["fdr", "pfdr"])
    def test_binds(self, model, crit):
        p = P.calibrate_mu(model, 0.1, crit, n_cal=2000, rng=2)
        c_err = 0.1 if crit == "fdr" else 0.0
        d = p.diagnostics
        assert d.g_hat <= c_err
        assert d.bracket_width <= 1e-4
        assert d.n_cal == 2000
        # just below mu* the estimated constraint is violated
        below = [g for m, g in d.evaluations if m < p.scalar]
        assert max(m for m, g in d.evaluations if m < p.scalar) >= p.scalar - 1e-4
        assert below[-1] > c_err

    def test_g_monotone_on_grid(self, model):
        cset = CalibrationSet.draw(model, 2000, 3)
        g = [cset.constraint_samples(mu, 0.1, Criterion.FDR).mean() for mu in np.geomspace(0.1, 1e4, 50)]
        assert np.all(np.diff(g) <= 1e-15)

    def test_common_random_numbers(self, model):
        a = P.calibrate_mu(model, 0.1, "fdr", n_cal=1000, rng=5)
        b = P.calibrate_mu(model, 0.1, "fdr", n_cal=1000, rng=5)
        assert a.scalar == b.scalar

    def test_bracket_failure(self, model):
        with pytest.raises(CalibrationError, match="mu_max"):
            P.calibrate_mu(model, 0.001, "pfdr", n_cal=1000, rng=1, mu_limit=4.0)

    def test_rejects_mfdr(self, model):
        with pytest.raises(ValueError):
            P.calibrate_mu(model, 0.1, "mfdr")

    def test_round_trip(self, model):
        p = P.calibrate_mu(model, 0.1, "pfdr", n_cal=1000, rng=1)
        q = CalibratedPolicy.from_dict(p.to_dict())
        assert q.scalar == p.scalar and q.criterion is p.criterion
        assert q.diagnostics.n_cal == 1000

    def test_monotonicity_check(self):
        assert P._is_monotone({0.0: (0.3, 0.01), 1.0: (0.2, 0.01), 2.0: (0.1, 0.01)})
        assert not P._is_monotone({0.0: (0.1, 0.001), 1.0: (0.3, 0.001)})

    def test_grid_fallback_picks_feasible_tail(self):
        g = lambda mu: 0.2 if mu < 3.0 or 5.0 < mu < 6.0 else 0.0
        mu = P._grid_search(g, 0.1, 10.0, 1e-3)
        assert mu > 6.0 and g(mu) <= 0.1


class TestMfdr:
    def test_threshold_mu_limits(self):
        assert P._mu_from_threshold(1.0, 0.05) == 0.0
        assert P._mu_from_threshold(0.05, 0.05) == np.inf
        mu = 7.0
        t = (1 + mu * 0.05) / (1 + mu)
        assert P._mu_from_threshold(t, 0.05) == pytest.approx(mu)

    def test_quadrature_root(self):
        model = TwoGroupModel.iid(100, 0.3, -1.5)
        p = P.mfdr_policy(model, 0.05)
        # E[(T - alpha) 1{T <= t}] = 0 at the root, checked on a fine independent grid
        from scipy import integrate
        from omtfdr.locfdr import marginal_locfdr
        mix = model.mixture
        f = lambda z: (marginal_locfdr(mix, z) - 0.05) * np.exp(mix.log_density(z))
        # T is increasing in z here, so {T <= t} is a half line
        zt = _invert(mix, p.scalar)
        val, _ = integrate.quad(f, -30, zt, epsabs=1e-13)
        assert abs(val) < 1e-6

    def test_monte_carlo_matches_quadrature(self):
        model = TwoGroupModel.iid(500, 0.3, -2.0)
        q = P.mfdr_policy(model, 0.05)
        cset = CalibrationSet.draw(model, 4000, 9)
        mc = P.mfdr_policy(model, 0.05, calibration_set=cset)
        assert mc.scalar == pytest.approx(q.scalar, abs=0.01)

    def test_degenerate_reject_none(self):
        model = TwoGroupModel.iid(50, 0.01, -0.2)
        p = P.mfdr_policy(model, 0.05)
        assert p.scalar == 0.0
        assert "degenerate" in p.diagnostics.note
        t = vec(np.full(50, 0.3))
        assert P.decide(p, t).sum() == 0

    def test_slack_reject_all(self):
        model = TwoGroupModel.iid(50, 0.5, -3.0)
        p = P.mfdr_policy(model, 0.9)
        assert p.scalar == 1.0

    def test_single_step(self):
        p = CalibratedPolicy("mfdr", 0.05, 0.3)
        d = P.decide(p, vec([0.1, 0.5, 0.3, 0.31]))
        np.testing.assert_array_equal(d, [1, 0, 1, 0])


def _invert(mix, t):
    from scipy.optimize import brentq
    from omtfdr.locfdr import marginal_locfdr
    return brentq(lambda z: marginal_locfdr(mix, z) - t, -30, 10)


class TestDecide:
    def test_batch_matches_single(self, rng):
        model = TwoGroupModel.iid(100, 0.2, -2.0)
        _, z = sample_batch(model, rng, 300)
        t = locfdr_batch(model, z)
        for crit in ("fdr", "pfdr"):
            p = CalibratedPolicy(crit, 0.1, float(rng.uniform(5, 200)))
            batch = P.decide_batch(p, t)
            for row, d in zip(t, batch):
                np.testing.assert_array_equal(P.decide(p, vec(row)), d)

    def test_policies_differ(self):
        # step-down can reject a locFDR above the single-step cutoff
        t = vec(np.r_[np.full(20, 0.001), 0.3])
        sd = P.decide(CalibratedPolicy("fdr", 0.05, 2.0), t)
        ss = P.decide(CalibratedPolicy("mfdr", 0.05, 0.25), t)
        assert sd[-1] == 1 and ss[-1] == 0


class TestBH:
    def test_worked_example(self):
        np.testing.assert_array_equal(P.bh([0.01, 0.02, 0.2], 0.05), [1, 1, 0])

    def test_all_ones(self):
        assert P.bh(np.ones(10), 0.05).sum() == 0

    def test_step_up(self):
        # the second p-value fails its own threshold but the third passes
        np.testing.assert_array_equal(P.bh([0.001, 0.04, 0.045], 0.05), [1, 1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
    def test_oracle_dominates(self, p):
        assert P.bh(p, 0.05, pi0_adjust=0.5).sum() >= P.bh(p, 0.05).sum()

    def test_batch(self, rng):
        p = rng.uniform(size=(20, 30)) ** 3
        out = P.bh(p, 0.1)
        for row, d in zip(p, out):
            np.testing.assert_array_equal(P.bh(row, 0.1), d)


class TestEstMfdr:
    def test_worked_example(self):
        np.testing.assert_array_equal(P.est_mfdr_stepup([0.30, 0.05, 0.01, 0.10], 0.05), [0, 1, 1, 0])

    def test_none(self):
        assert P.est_mfdr_stepup([0.2, 0.3], 0.05).sum() == 0

    def test_boundary_all(self):
        assert P.est_mfdr_stepup(np.full(7, 0.05), 0.05).sum() == 7
