import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omtfdr.model import (Blocks, Equicorrelated, MarginalMixture, ModelError, NormalComponent,
                          TwoGroupModel, child_stream, marginal_density, sample, sample_batch, sample_z)

PDF0 = 0.398942280401432677939946059934          # standard normal density at 0 (mpmath)
TWO_COMP_AT_0 = 0.241970724519143349797830192936  # mean of N(1,1) and N(-1,1) densities at 0


class TestComponents:
    def test_rejects_bad_sd(self):
        with pytest.raises(ModelError):
            NormalComponent(1.0, 0.0, 0.0)

    def test_rejects_bad_weight(self):
        with pytest.raises(ModelError):
            NormalComponent(1.5, 0.0, 1.0)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ModelError):
            MarginalMixture(0.1, [(0.5, 0, 1)], [(1, -2, 1)])

    def test_empty_list(self):
        with pytest.raises(ModelError):
            MarginalMixture(0.1, [], [(1, -2, 1)])

    @pytest.mark.parametrize("pi", [-0.1, 1.1])
    def test_pi_range(self, pi):
        with pytest.raises(ModelError):
            MarginalMixture.normal(pi, -2.0)


class TestMarginalDensity:
    def test_standard_normal_at_zero(self):
        mix = MarginalMixture.normal(0.1, -2.0)
        assert marginal_density(mix, 0.0, "null") == pytest.approx(PDF0, rel=1e-14)

    def test_pi_zero_is_null(self):
        mix = MarginalMixture.normal(0.0, -2.0)
        z = np.linspace(-8, 8, 41)
        np.testing.assert_allclose(marginal_density(mix, z, "mixed"), marginal_density(mix, z, "null"),
                                   rtol=1e-14)

    def test_two_null_components(self):
        mix = MarginalMixture(0.2, [(0.5, 1.0, 1.0), (0.5, -1.0, 1.0)], [(1.0, -3.0, 1.0)])
        assert marginal_density(mix, 0.0, "null") == pytest.approx(TWO_COMP_AT_0, rel=1e-13)

    @given(st.floats(0, 1), st.floats(-30, 30))
    def test_mixture_identity(self, pi, z):
        mix = MarginalMixture(pi, [(0.3, 0.5, 1.2), (0.7, 0.0, 1.0)], [(1.0, -2.0, 1.1)])
        lhs = marginal_density(mix, z, "mixed")
        rhs = (1 - pi) * marginal_density(mix, z, "null") + pi * marginal_density(mix, z, "alt")
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)

    def test_unknown_state(self):
        with pytest.raises(ValueError):
            marginal_density(MarginalMixture.normal(0.1, -2.0), 0.0, "both")


class TestDependence:
    def test_blocks_sizes_must_sum(self):
        with pytest.raises(ModelError):
            TwoGroupModel(10, MarginalMixture.normal(0.3, -1.5), Blocks((5, 4), 0.5, -1.5))

    def test_blocks_not_pd(self):
        with pytest.raises(ModelError):
            TwoGroupModel.blocks(10, 0.3, 5, 1.5, -1.5)

    @pytest.mark.parametrize("rho", [-0.5, 1.0])
    def test_equicorrelated_range(self, rho):
        with pytest.raises(ModelError):
            TwoGroupModel.equicorrelated(4, 0.2, rho, 1.0, -2.0)

    def test_equicorrelated_precision(self):
        dep = Equicorrelated(0.3, 2.0, -1.0)
        a, b = dep.precision_entries(5)
        prec = np.linalg.inv(dep.covariance(5))
        assert prec[0, 0] == pytest.approx(a, rel=1e-12)
        assert prec[0, 1] == pytest.approx(b, rel=1e-12)

    def test_h_dependent_diagonal(self):
        dep = Blocks.uniform(5, 5, 0.5, -1.5, alt_var=1.01)
        cov = dep.covariance(np.array([1, 0, 1, 0, 0]), 0)
        np.testing.assert_allclose(np.diag(cov), [1.01, 1, 1.01, 1, 1])
        assert cov[0, 1] == 0.5


class TestSampling:
    def test_pi_zero(self, rng):
        s = sample(TwoGroupModel.iid(1000, 0.0, -2.0), rng)
        assert s.h.sum() == 0
        assert abs(s.z.mean()) < 4 / np.sqrt(1000)

    def test_pi_one(self, rng):
        s = sample(TwoGroupModel.iid(100, 1.0, -2.0), rng)
        assert s.h.sum() == 100

    @pytest.mark.parametrize("model", [
        TwoGroupModel.iid(50, 0.3, -1.5),
        TwoGroupModel.blocks(50, 0.3, 5, 0.5, -1.5, alt_var=1.01),
        TwoGroupModel.equicorrelated(50, 0.3, 0.4, 1.0, -1.5),
    ], ids=["iid", "blocks", "equicorr"])
    def test_state_frequency(self, model, rng):
        n = 2000
        h, z = sample_batch(model, rng, n)
        assert h.shape == z.shape == (n, model.k)
        pi = model.pi
        assert abs(h.mean() - pi) < 4 * np.sqrt(pi * (1 - pi) / (n * model.k))

    def test_equicorrelated_k2_correlation(self, rng):
        model = TwoGroupModel.equicorrelated(2, 0.5, 0.5, 1.0, -2.0)
        zs = sample_z_many(model, np.zeros(2, dtype=np.int8), rng, 100_000)
        assert np.corrcoef(zs.T)[0, 1] == pytest.approx(0.5, abs=0.01)

    def test_equicorrelated_covariance(self, rng):
        model = TwoGroupModel.equicorrelated(4, 0.3, 0.3, 2.0, -1.0)
        h = np.array([1, 0, 1, 0])
        zs = sample_z_many(model, h, rng, 100_000)
        cov = np.cov(zs.T)
        # entrywise sd of a sample covariance is below sigma^2 sqrt(2/n)
        np.testing.assert_allclose(cov, model.dependence.covariance(4), atol=5 * 2.0 * np.sqrt(2 / 1e5))
        np.testing.assert_allclose(zs.mean(axis=0), -1.0 * h, atol=5 * np.sqrt(2.0 / 1e5))

    def test_block_sample_moments(self, rng):
        model = TwoGroupModel.blocks(10, 0.3, 5, 0.5, -1.5, alt_var=1.01)
        h = np.array([1, 1, 0, 0, 0, 0, 1, 0, 1, 0])
        zs = sample_z_many(model, h, rng, 50_000)
        mean, cov = model.conditional_gaussian(h)
        np.testing.assert_allclose(np.cov(zs.T), cov, atol=0.03)
        np.testing.assert_allclose(zs.mean(axis=0), mean, atol=0.03)

    def test_child_streams_reproducible(self):
        model = TwoGroupModel.iid(20, 0.3, -1.5)
        a = sample(model, child_stream(7, 1, 3))
        b = sample(model, child_stream(7, 1, 3))
        c = sample(model, child_stream(7, 1, 4))
        np.testing.assert_array_equal(a.z, b.z)
        assert not np.array_equal(a.z, c.z)


def sample_z_many(model, h, rng, n):
    # sample_z accepts a 2-d stack of state vectors
    return sample_z(model, np.broadcast_to(h, (n, len(h))).copy(), rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_sample_shapes(k, pi, seed):
    s = sample(TwoGroupModel.iid(k, pi, -2.0), np.random.default_rng(seed))
    assert s.h.shape == s.z.shape == (k,)
    assert set(np.unique(s.h)) <= {0, 1}
