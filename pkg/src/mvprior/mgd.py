"""Full-covariance multivariate Gaussians.

All factorizations go through :func:`jittered_cholesky`, which walks a fixed
ladder ``lambda in {0, 1e-12, 1e-10, 1e-8, 1e-6} * trace(S)/k`` and returns
the first factor that succeeds. The posterior built by the bottleneck is often
close to singular, so every consumer (sampling, KL, Mahalanobis, log-density)
tolerates it the same way.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, InsufficientDataError, NotPSDError

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def jittered_cholesky(sigma: np.ndarray, *, allow_zero: bool = False) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``sigma + lam*I`` and the ``lam`` that was used.

    With ``allow_zero`` a zero-trace matrix yields a zero factor (used by
    sampling, where a point mass is legitimate).
    """
    k = sigma.shape[0]
    scale = float(np.trace(sigma)) / k
    if scale == 0.0 and allow_zero and not np.any(sigma):
        return np.zeros_like(sigma), 0.0
    eye = np.eye(k)
    for rung in JITTER_LADDER:
        lam = rung * scale
        try:
            return np.linalg.cholesky(sigma + lam * eye), lam
        except np.linalg.LinAlgError:
            continue
    raise NotPSDError(f"covariance is not positive semi-definite (trace/k = {scale:.3g})")


@dataclass(frozen=True, eq=False)
class GaussianND:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        sigma = np.array(self.sigma, dtype=float)
        k = mu.shape[0]
        if sigma.shape != (k, k):
            raise DimensionMismatchError(f"mu has length {k} but sigma has shape {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise NotPSDError("non-finite Gaussian parameters")
        sigma = symmetrize(sigma)
        jittered_cholesky(sigma, allow_zero=True)
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    def to_dict(self) -> dict:
        return {"k": self.k, "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> GaussianND:
        g = cls(d["mu"], d["sigma"])
        if "k" in d and int(d["k"]) != g.k:
            raise DimensionMismatchError(f"header says k={d['k']} but mu has length {g.k}")
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> GaussianND:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __repr__(self):
        return f"GaussianND(k={self.k}, mu={np.array2string(self.mu, precision=4)})"


def fit(samples) -> GaussianND:
    """Sample mean and unbiased (n-1) covariance."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise DimensionMismatchError(f"samples must be n x k, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    return GaussianND(mu, xc.T @ xc / (n - 1))


def sample(g: GaussianND, n: int, rng: np.random.Generator) -> np.ndarray:
    L, _ = jittered_cholesky(g.sigma, allow_zero=True)
    eps = rng.standard_normal((n, g.k))
    return g.mu + eps @ L.T


def _check_same_k(a: GaussianND, b: GaussianND):
    if a.k != b.k:
        raise DimensionMismatchError(f"dimension mismatch: {a.k} vs {b.k}")


def _logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def kl_divergence(q: GaussianND, p: GaussianND) -> float:
    """Closed-form D_KL(q || p)."""
    _check_same_k(q, p)
    Lp, _ = jittered_cholesky(p.sigma)
    Lq, _ = jittered_cholesky(q.sigma)
    k = q.k
    a = np.linalg.solve(Lp, Lq)
    diff = np.linalg.solve(Lp, p.mu - q.mu)
    kl = 0.5 * (np.sum(a * a) + diff @ diff - k + _logdet(Lp) - _logdet(Lq))
    return max(float(kl), 0.0) if kl > -1e-10 else float(kl)


def kl_divergence_grad(q: GaussianND, p: GaussianND) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(q || p) and its gradients w.r.t. q.mu and q.sigma.

    The jitter chosen for each covariance is held fixed while differentiating.
    The returned sigma-gradient is symmetric.
    """
    _check_same_k(q, p)
    k = q.k
    Lp, lam_p = jittered_cholesky(p.sigma)
    Lq, lam_q = jittered_cholesky(q.sigma)
    eye = np.eye(k)
    p_inv = np.linalg.solve(p.sigma + lam_p * eye, eye)
    q_inv = np.linalg.solve(q.sigma + lam_q * eye, eye)
    d = q.mu - p.mu
    kl = 0.5 * (np.trace(p_inv @ (q.sigma + lam_q * eye)) + d @ p_inv @ d - k + _logdet(Lp) - _logdet(Lq))
    return float(kl), p_inv @ d, symmetrize(0.5 * (p_inv - q_inv))


def mahalanobis(p: GaussianND, q: GaussianND) -> float:
    """(mu_p - mu_q)^T [(S_p + S_q)/2]^-1 (mu_p - mu_q)."""
    _check_same_k(p, q)
    L, _ = jittered_cholesky(0.5 * (p.sigma + q.sigma))
    y = np.linalg.solve(L, p.mu - q.mu)
    return float(y @ y)


def log_pdf(g: GaussianND, x) -> float | np.ndarray:
    """Log-density at ``x`` (a k-vector, or an n x k batch)."""
    x = np.asarray(x, dtype=float)
    L, _ = jittered_cholesky(g.sigma)
    d = np.atleast_2d(x) - g.mu
    y = np.linalg.solve(L, d.T)
    out = -0.5 * (np.sum(y * y, axis=0) + g.k * math.log(2 * math.pi) + _logdet(L))
    return float(out[0]) if x.ndim == 1 else out


_DATA = Path(__file__).with_name("data")


def published_prior() -> GaussianND:
    """The published motion prior over (dsx, dsy, sin(theta), dx, dy)."""
    return GaussianND.load(_DATA / "published_prior.json")


# Rounded per-variable marginals N(mean, std) of the same prior.
ROUNDED_MARGINALS = (
    (1.06, 0.52),
    (1.06, 0.54),
    (0.0, 0.43),
    (0.07, 0.34),
    (0.08, 0.74),
)


def marginal_prior() -> GaussianND:
    """Independent-marginal version of the prior used for reparameterization."""
    m = np.array(ROUNDED_MARGINALS)
    return GaussianND(m[:, 0], np.diag(m[:, 1] ** 2))
