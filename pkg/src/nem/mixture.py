"""Spatial mixture model: per-pixel likelihoods, posteriors, and bounds.

Shape conventions: x is (..., D) with D flattened pixels, psi is
(..., K, D) component predictions, gamma is (..., D, K) posteriors, pi is
(K,) mixing weights. All heavy math happens through the tensor primitives
so results stay differentiable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor

logger = logging.getLogger(__name__)

FAMILIES = ("bernoulli", "gaussian")


@dataclass(frozen=True)
class PixelModel:
    """Conditional pixel distribution and its fixed hyperparameters.

    Bernoulli uses psi as the on-probability and `prior` as the prior
    on-probability; Gaussian uses psi as the mean with fixed variance
    sigma2 and prior mean `prior`.
    """

    family: str = "bernoulli"
    sigma2: float = 0.25
    prior: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown pixel family '{self.family}'")
        if self.family == "gaussian" and self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.family == "bernoulli" and not 0.0 <= self.prior <= 1.0:
            raise ConfigError(f"bernoulli prior must lie in [0, 1], got {self.prior}")


def uniform_mixing(k: int, dtype=np.float32) -> Tensor:
    if k < 1:
        raise ConfigError(f"need at least one component, got {k}")
    return Tensor(np.full(k, 1.0 / k, dtype=dtype))


def _expand_x(x: Tensor) -> Tensor:
    # (..., D) -> (..., 1, D) so it broadcasts against (..., K, D)
    return T.reshape(x, x.shape[:-1] + (1,) + x.shape[-1:])


def pixel_log_likelihood(x: Tensor, psi: Tensor, model: PixelModel) -> Tensor:
    """log P(x_i | psi_{k,i}) for every pixel/component pair, (..., K, D).

    Bernoulli probabilities are clamped away from {0, 1} before the log,
    so the result is finite for saturated predictions.
    """
    xk = _expand_x(x)
    if model.family == "bernoulli":
        eps = T.eps_for(psi.dtype)
        p = T.clip(psi, eps, 1.0 - eps)
        return T.add(T.mul(xk, T.log(p)), T.mul(T.sub(1.0, xk), T.log(T.sub(1.0, p))))
    diff = T.sub(xk, psi)
    const = -0.5 * math.log(2.0 * math.pi * model.sigma2)
    return T.add(T.mul(T.mul(diff, diff), -1.0 / (2.0 * model.sigma2)), const)


def _log_joint(x: Tensor, psi: Tensor, pi: Tensor, model: PixelModel) -> Tensor:
    # log pi_k + log P(x_i | psi_{k,i}), shape (..., K, D)
    ll = pixel_log_likelihood(x, psi, model)
    log_pi = T.reshape(T.log(pi), (pi.shape[0], 1))
    return T.add(ll, log_pi)


def e_step(x: Tensor, psi: Tensor, pi: Tensor, model: PixelModel) -> Tensor:
    """Posterior responsibilities gamma, shape (..., D, K).

    Computed in log space with the per-pixel max subtracted before
    exponentiation. Pixels whose scores are all non-finite fall back to
    the mixing weights; the fallback is counted and logged rather than
    silently produced.
    """
    s = _log_joint(x, psi, pi, model)
    m = np.max(s.data, axis=-2, keepdims=True)
    bad = ~np.isfinite(m)
    if bad.any():
        m = np.where(bad, 0.0, m)
    w = T.exp(T.sub(s, Tensor(m)))
    denom = T.reduce_sum(w, axis=-2, keepdims=True)
    gamma = T.swap_last_two(T.div(w, denom))
    if bad.any():
        count = int(bad.sum())
        logger.warning("e_step: %d pixel(s) had no finite component score; used mixing weights", count)
        pi_row = T.reshape(pi, (1,) * (gamma.ndim - 1) + (pi.shape[0],))
        gamma = T.where(np.swapaxes(bad, -1, -2), pi_row, gamma)
    return gamma


def log_likelihood(x: Tensor, psi: Tensor, pi: Tensor, model: PixelModel) -> Tensor:
    """log P(x) under the mixture, summed over pixels; shape (...,)."""
    s = _log_joint(x, psi, pi, model)
    per_pixel = T.logsumexp(s, axis=-2)
    return T.reduce_sum(per_pixel, axis=-1)


def q_lower_bound(x: Tensor, psi: Tensor, gamma: Tensor, pi: Tensor, model: PixelModel) -> Tensor:
    """Expected complete-data log likelihood sum_i sum_k gamma * log joint.

    Equals log_likelihood minus the (non-negative) posterior entropy gap,
    so it lower-bounds the likelihood for any valid gamma.
    """
    s = _log_joint(x, psi, pi, model)
    return T.reduce_sum(T.mul(T.swap_last_two(gamma), s), axis=(-2, -1))


def kl_to_prior(psi: Tensor, model: PixelModel) -> Tensor:
    """KL(prior pixel distribution || predicted pixel distribution), (..., K, D).

    For Bernoulli both arguments are clamped to [eps, 1-eps], which caps a
    single pixel's divergence near -log(eps). The Gaussian case reduces to
    the squared mean gap over 2*sigma2 because the variances match.
    """
    if model.family == "bernoulli":
        eps = T.eps_for(psi.dtype)
        p0 = min(max(model.prior, eps), 1.0 - eps)
        q = T.clip(psi, eps, 1.0 - eps)
        entropy = p0 * math.log(p0) + (1.0 - p0) * math.log(1.0 - p0)
        cross = T.add(T.mul(p0, T.log(q)), T.mul(1.0 - p0, T.log(T.sub(1.0, q))))
        return T.sub(entropy, cross)
    diff = T.sub(model.prior, psi)
    return T.mul(T.mul(diff, diff), 1.0 / (2.0 * model.sigma2))
