"""Mixture-layer checks against exhaustive enumeration and closed forms."""

import math

import numpy as np
import pytest

from nem import tensor as T
from nem.mixture import (
    PixelModel,
    e_step,
    kl_to_prior,
    log_likelihood,
    pixel_log_likelihood,
    q_lower_bound,
    uniform_mixing,
)
from nem.tensor import ConfigError, Tensor

from oracles import bernoulli_pixel_lik, enumerate_mixture, gaussian_pixel_lik

F64 = np.float64


def random_case(rng, k, d, family):
    if family == "bernoulli":
        x = (rng.random(d) > 0.5).astype(F64)
        psi = rng.uniform(0.05, 0.95, (k, d))
    else:
        x = rng.standard_normal(d)
        psi = rng.standard_normal((k, d))
    pi = rng.dirichlet(np.ones(k))
    return x, psi, pi


class TestAgainstEnumeration:
    """Posterior and likelihood must match the K**D brute-force sums."""

    @pytest.mark.parametrize("family", ["bernoulli", "gaussian"])
    @pytest.mark.parametrize("k,d", [(2, 2), (2, 4), (3, 3), (3, 4)])
    def test_matches_brute_force(self, family, k, d):
        rng = np.random.default_rng(hash((family, k, d)) % 2**32)
        model = PixelModel(family=family, sigma2=0.25)
        if family == "bernoulli":
            lik = lambda xv, pv: bernoulli_pixel_lik(xv, pv)
        else:
            lik = lambda xv, pv: gaussian_pixel_lik(xv, pv, model.sigma2)
        for _ in range(3):
            x, psi, pi = random_case(rng, k, d, family)
            total, gamma_ref = enumerate_mixture(x, psi, pi, lik)

            xt = Tensor(x, dtype=F64)
            pt = Tensor(psi, dtype=F64)
            pit = Tensor(pi, dtype=F64)
            ll = log_likelihood(xt, pt, pit, model)
            gamma = e_step(xt, pt, pit, model)
            np.testing.assert_allclose(float(ll.data), math.log(total), atol=1e-10)
            np.testing.assert_allclose(gamma.data, gamma_ref, atol=1e-10)

    def test_q_bound_below_likelihood(self):
        rng = np.random.default_rng(7)
        model = PixelModel(family="gaussian")
        x, psi, pi = random_case(rng, 3, 4, "gaussian")
        xt, pt, pit = Tensor(x, dtype=F64), Tensor(psi, dtype=F64), Tensor(pi, dtype=F64)
        gamma = e_step(xt, pt, pit, model)
        q = q_lower_bound(xt, pt, gamma, pit, model)
        ll = log_likelihood(xt, pt, pit, model)
        # Q omits the posterior entropy, so the gap is exactly that entropy.
        ent = -np.sum(gamma.data * np.log(np.maximum(gamma.data, 1e-300)))
        np.testing.assert_allclose(float(q.data) + ent, float(ll.data), atol=1e-9)
        assert float(q.data) <= float(ll.data) + 1e-12


class TestResponsibilities:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        model = PixelModel(family="bernoulli")
        psi = Tensor(rng.uniform(0, 1, (2, 4, 9)), dtype=F64)
        x = Tensor((rng.random((2, 9)) > 0.5).astype(F64))
        gamma = e_step(x, psi, uniform_mixing(4, F64), model)
        assert gamma.shape == (2, 9, 4)
        np.testing.assert_allclose(gamma.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_saturated_predictions_stay_finite(self):
        # psi exactly 0/1 with contradicting pixels would produce -inf
        # scores without the clamp.
        model = PixelModel(family="bernoulli")
        psi = Tensor(np.array([[[0.0, 1.0]], [[1.0, 0.0]]]).reshape(1, 2, 2), dtype=F64)
        x = Tensor(np.array([[1.0, 1.0]]), dtype=F64)
        gamma = e_step(x, psi, uniform_mixing(2, F64), model)
        assert np.all(np.isfinite(gamma.data))
        np.testing.assert_allclose(gamma.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_dominant_component_wins(self):
        model = PixelModel(family="gaussian", sigma2=0.25)
        x = Tensor(np.array([1.0, 1.0]), dtype=F64)
        psi = Tensor(np.array([[1.0, 1.0], [-5.0, -5.0]]), dtype=F64)
        gamma = e_step(x, psi, uniform_mixing(2, F64), model)
        assert gamma.data[0, 0] > 0.999
        assert gamma.data[1, 0] > 0.999

    def test_extreme_scores_no_overflow(self):
        model = PixelModel(family="gaussian", sigma2=0.25)
        x = Tensor(np.array([0.0, 1000.0]), dtype=F64)
        psi = Tensor(np.array([[0.0, -1000.0], [1000.0, 1000.0]]), dtype=F64)
        gamma = e_step(x, psi, uniform_mixing(2, F64), model)
        assert np.all(np.isfinite(gamma.data))
        np.testing.assert_allclose(gamma.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_nonfinite_fallback_counted(self, caplog):
        model = PixelModel(family="gaussian", sigma2=0.25)
        psi = Tensor(np.array([[np.nan, 0.0], [np.nan, 0.0]]).reshape(1, 2, 2), dtype=F64)
        x = Tensor(np.zeros((1, 2)), dtype=F64)
        with caplog.at_level("WARNING", logger="nem.mixture"):
            gamma = e_step(x, psi, uniform_mixing(2, F64), model)
        assert "1 pixel" in caplog.text
        np.testing.assert_allclose(gamma.data[0, 0], [0.5, 0.5])
        assert np.all(np.isfinite(gamma.data))


class TestKl:
    def test_bernoulli_zero_prior_formula(self):
        model = PixelModel(family="bernoulli", prior=0.0)
        psi = Tensor(np.array([[0.3, 0.5]]), dtype=F64)
        out = kl_to_prior(psi, model)
        eps = 1e-12
        expected = -(eps * np.log(np.array([0.3, 0.5])) + (1 - eps) * np.log1p(-np.array([0.3, 0.5])))
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-6)

    def test_bernoulli_bounded_at_saturation(self):
        model = PixelModel(family="bernoulli", prior=0.0)
        psi32 = Tensor(np.array([[1.0]], dtype=np.float32))
        out = kl_to_prior(psi32, model)
        assert np.isfinite(out.data).all()
        # one fully-on pixel against an all-off prior costs about -log(1e-6);
        # float32 rounding of 1-(1-eps) shifts it by ~0.01
        assert abs(float(out.data[0, 0]) - 13.8155) < 0.05

    def test_kl_nonnegative_and_zero_at_prior(self):
        rng = np.random.default_rng(9)
        model = PixelModel(family="bernoulli", prior=0.2)
        psi = Tensor(rng.uniform(0.01, 0.99, (3, 8)), dtype=F64)
        assert (kl_to_prior(psi, model).data >= -1e-15).all()
        at_prior = kl_to_prior(Tensor(np.full((1, 4), 0.2), dtype=F64), model)
        np.testing.assert_allclose(at_prior.data, 0.0, atol=1e-12)

    def test_gaussian_quadratic(self):
        model = PixelModel(family="gaussian", sigma2=0.25, prior=0.0)
        psi = Tensor(np.array([[1.0, -2.0]]), dtype=F64)
        np.testing.assert_allclose(kl_to_prior(psi, model).data[0], [2.0, 8.0])


class TestValidation:
    def test_family_rejected(self):
        with pytest.raises(ConfigError, match="poisson"):
            PixelModel(family="poisson")

    def test_sigma2_positive(self):
        with pytest.raises(ConfigError):
            PixelModel(family="gaussian", sigma2=0.0)

    def test_pixel_log_likelihood_shape(self):
        model = PixelModel(family="bernoulli")
        out = pixel_log_likelihood(
            Tensor(np.zeros((2, 5))), Tensor(np.full((2, 3, 5), 0.5)), model
        )
        assert out.shape == (2, 3, 5)
        np.testing.assert_allclose(out.data, math.log(0.5), rtol=1e-6)


class TestGradientsFlow:
    def test_e_step_differentiable_wrt_psi(self):
        from oracles import finite_difference_grad, rel_err

        model = PixelModel(family="gaussian", sigma2=0.5)
        rng = np.random.default_rng(10)
        psi0 = rng.standard_normal((2, 3))
        x = rng.standard_normal(3)
        w = rng.standard_normal((3, 2))
        pi = np.full(2, 0.5)

        psi = Tensor(psi0, requires_grad=True, dtype=F64)
        with T.Tape() as tape:
            gamma = e_step(Tensor(x, dtype=F64), psi, Tensor(pi, dtype=F64), model)
            loss = T.reduce_sum(T.mul(gamma, Tensor(w, dtype=F64)))
        grads = tape.backward(loss)

        def f(p):
            g = e_step(Tensor(x, dtype=F64), Tensor(p, dtype=F64), Tensor(pi, dtype=F64), model)
            return float(np.sum(g.data * w))

        numeric = finite_difference_grad(f, [psi0.copy()], 0)
        assert rel_err(grads[psi], numeric) < 1e-6
