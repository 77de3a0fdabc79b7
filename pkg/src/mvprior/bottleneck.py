"""Posterior bottleneck: two 50-unit heads -> (mu', Sigma') -> latent samples.

Both heads are split into 5 contiguous parts of 10 neurons, one part per
latent variable. The covariance is never predicted entry by entry. Instead each
part is reduced to 10 batch-axis norms, and Sigma' is the sample covariance of
those 5 x 10 observations. That makes it symmetric PSD by construction.

The posterior is per batch: one (mu', Sigma') for all B rows.

Every forward function has a matching ``*_backward`` vector-Jacobian product
used by :mod:`mvprior.network`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError
from .mgd import GaussianND, symmetrize

N_VARS = 5
N_PER_VAR = 10
HEAD_WIDTH = N_VARS * N_PER_VAR


@dataclass(frozen=True, eq=False)
class HeadActivations:
    mu_head: np.ndarray
    sigma_head: np.ndarray

    def __post_init__(self):
        for name in ("mu_head", "sigma_head"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 2 or a.shape[1] != HEAD_WIDTH or a.shape[0] < 1:
                raise DimensionMismatchError(f"{name} must be B x {HEAD_WIDTH}, got {a.shape}")
            object.__setattr__(self, name, a)
        if self.mu_head.shape != self.sigma_head.shape:
            raise DimensionMismatchError("heads disagree on batch size")

    @property
    def batch(self) -> int:
        return self.mu_head.shape[0]


@dataclass(frozen=True, eq=False)
class PosteriorParams:
    mu_prime: np.ndarray
    sigma_prime: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_prime), 0.0, None))

    def gaussian(self) -> GaussianND:
        return GaussianND(self.mu_prime, self.sigma_prime)


def _parts(a: np.ndarray) -> np.ndarray:
    # (B, 50) -> (B, 5, 10), variable-major
    return a.reshape(a.shape[0], N_VARS, N_PER_VAR)


def mean_head(a: HeadActivations) -> np.ndarray:
    """mu'_i = mean over the batch and the 10 neurons of part i."""
    return _parts(a.mu_head).mean(axis=(0, 2))


def mean_head_backward(d_mu: np.ndarray, batch: int) -> np.ndarray:
    g = np.broadcast_to(np.asarray(d_mu)[None, :, None], (batch, N_VARS, N_PER_VAR))
    return g.reshape(batch, HEAD_WIDTH) / (batch * N_PER_VAR)


def head_norms(sigma_head: np.ndarray) -> np.ndarray:
    """5 x 10 table of Euclidean norms along the batch axis."""
    return np.sqrt(np.sum(_parts(sigma_head) ** 2, axis=0))


def cov_head(a: HeadActivations) -> np.ndarray:
    """Sample covariance (divisor 9) of the 5 norm vectors, exactly symmetric."""
    n = head_norms(a.sigma_head)
    nc = n - n.mean(axis=1, keepdims=True)
    return symmetrize(nc @ nc.T / (N_PER_VAR - 1))


def cov_head_backward(d_sigma: np.ndarray, sigma_head: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the sigma head given dL/dSigma' (any 5x5 matrix)."""
    parts = _parts(sigma_head)
    n = np.sqrt(np.sum(parts ** 2, axis=0))
    nc = n - n.mean(axis=1, keepdims=True)
    gs = symmetrize(np.asarray(d_sigma, dtype=float))
    d_nc = 2.0 * gs @ nc / (N_PER_VAR - 1)
    d_n = d_nc - d_nc.mean(axis=1, keepdims=True)
    # subgradient 0 where a norm is exactly zero
    safe = np.where(n > 0, n, 1.0)
    d_parts = parts * np.where(n > 0, d_n / safe, 0.0)[None]
    return d_parts.reshape(sigma_head.shape)


def posterior_from_heads(a: HeadActivations) -> PosteriorParams:
    return PosteriorParams(mean_head(a), cov_head(a))


def arrange_prior_samples(samples: np.ndarray, batch: int) -> np.ndarray:
    """Lay out ``batch*10`` prior draws (rows of 5) as a B x 50 eps matrix.

    Column ``10*i + j`` of row ``b`` holds variable ``i`` of draw ``10*b + j``.
    """
    s = np.asarray(samples, dtype=float)
    if s.shape != (batch * N_PER_VAR, N_VARS):
        raise DimensionMismatchError(f"expected {(batch * N_PER_VAR, N_VARS)} samples, got {s.shape}")
    return s.reshape(batch, N_PER_VAR, N_VARS).transpose(0, 2, 1).reshape(batch, HEAD_WIDTH)


def _affine(prior: GaussianND, post: PosteriorParams):
    sigma = prior.std
    if prior.k != N_VARS or np.asarray(post.mu_prime).shape != (N_VARS,):
        raise DimensionMismatchError("reparameterization needs 5-D prior and posterior")
    if np.any(sigma == 0):
        raise InvalidParameterError("prior has a zero marginal standard deviation")
    a = post.std / sigma
    b = post.mu_prime - prior.mu * a
    return a, b


def reparameterize(prior: GaussianND, post: PosteriorParams, eps: np.ndarray) -> np.ndarray:
    """z_i = a_i * eps_i + b_i with a_i = s'_i/s_i, b_i = mu'_i - mu_i*a_i; returns B x 5 x 10."""
    eps = np.asarray(eps, dtype=float)
    if eps.ndim != 2 or eps.shape[1] != HEAD_WIDTH:
        raise DimensionMismatchError(f"eps must be B x {HEAD_WIDTH}, got {eps.shape}")
    a, b = _affine(prior, post)
    return _parts(eps) * a[None, :, None] + b[None, :, None]


def reparameterize_backward(prior: GaussianND, post: PosteriorParams, eps: np.ndarray, d_z: np.ndarray):
    """Gradients (d mu', d Sigma') given dL/dz of shape B x 5 x 10.

    Only the diagonal of Sigma' receives gradient here.
    """
    sigma = prior.std
    e = _parts(np.asarray(eps, dtype=float))
    d_mu = d_z.sum(axis=(0, 2))
    d_std = np.sum(d_z * (e - prior.mu[None, :, None]), axis=(0, 2)) / sigma
    s = post.std
    d_var = np.where(s > 0, d_std / (2 * np.where(s > 0, s, 1.0)), 0.0)
    return d_mu, np.diag(d_var)
