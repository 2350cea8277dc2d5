"""Gaussian-mixture targets, their density ratio to the reference Gaussian,
and closed-form marginals and scores under the VP-SDE.

All density arithmetic happens in log-space with max-shifted
log-sum-exp, so values stay finite well outside the working ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from .errors import ContractViolation, RangeError
from .schedule import NoiseSchedule, lambda_at

LOG_2PI = math.log(2.0 * math.pi)
MIN_WEIGHT = 1e-12
MIN_LIPSCHITZ = 1e-12
# exp() overflows just above this
_MAX_LOG = 700.0


def _as_cov(spec, dim):
    cov = np.asarray(spec, dtype=float)
    if cov.ndim == 0:
        return float(cov) * np.eye(dim)
    if cov.ndim == 1:
        if cov.shape[0] != dim:
            raise ContractViolation(f"diagonal covariance has length {cov.shape[0]}, expected {dim}")
        return np.diag(cov)
    if cov.shape != (dim, dim):
        raise ContractViolation(f"covariance has shape {cov.shape}, expected {(dim, dim)}")
    return cov


class GaussianMixture:
    """Finite mixture of full-covariance Gaussians.

    Args:
        weights: Mixing weights, shape ``(K,)``; must sum to one.
        means: Component means, shape ``(K, dim)``.
        covs: Per-component covariance. Each entry may be a scalar
            (isotropic), a length-``dim`` vector (diagonal) or a full
            ``dim x dim`` matrix.
    """

    def __init__(self, weights, means, covs):
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means[:, None] if weights.size > 1 and means.size == weights.size else means[None, :]
        if means.ndim != 2 or means.shape[0] != weights.size:
            raise ContractViolation(f"means must have shape (K, dim); got {means.shape} for K={weights.size}")
        dim = means.shape[1]
        if dim < 1:
            raise ContractViolation("dimension must be positive")
        if np.any(weights < MIN_WEIGHT) or np.any(weights > 1.0):
            raise ContractViolation(f"weights must lie in [{MIN_WEIGHT}, 1], got {weights}")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"weights sum to {weights.sum():.17g}, not 1")
        if len(covs) != weights.size:
            raise ContractViolation("one covariance per component is required")
        covs = np.stack([_as_cov(c, dim) for c in covs])
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-12):
            raise ContractViolation("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise ContractViolation("every covariance must be positive definite") from exc

        self.dim = dim
        self.weights = weights
        self.means = means
        self.covs = covs
        self.chol = chol
        self.precisions = np.linalg.inv(covs)
        self.logdets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        for arr in (self.weights, self.means, self.covs, self.chol, self.precisions, self.logdets):
            arr.setflags(write=False)

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls([1.0], mean[None, :], [cov])

    @classmethod
    def from_spec(cls, components):
        """Build from a list of ``{"weight", "mean", "cov"}`` mappings."""
        if not components:
            raise ContractViolation("target needs at least one component")
        weights = [float(c["weight"]) for c in components]
        means = [np.atleast_1d(np.asarray(c["mean"], dtype=float)) for c in components]
        if len({m.shape for m in means}) != 1:
            raise ContractViolation("all component means must have the same length")
        return cls(weights, np.stack(means), [c["cov"] for c in components])

    @property
    def n_components(self):
        return self.weights.size

    @property
    def components(self):
        return list(zip(self.weights, self.means, self.covs))

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, diff, diff)

    def to_spec(self):
        return [
            {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
            for w, m, c in self.components
        ]

    def sample(self, rng, n):
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self.chol[idx], z)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ContractViolation(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def component_log_densities(self, x):
        """``log w_k + log N(x; m_k, S_k)`` with shape ``(K, ...)``."""
        x = self._check(x)
        out = []
        for k in range(self.n_components):
            diff = x - self.means[k]
            maha = np.sum((diff @ self.precisions[k]) * diff, axis=-1)
            out.append(math.log(self.weights[k]) - 0.5 * (maha + self.logdets[k] + self.dim * LOG_2PI))
        return np.stack(out)

    def score(self, x):
        """Responsibility-weighted component scores, shape like ``x``."""
        x = self._check(x)
        logs = self.component_log_densities(x)
        resp = np.exp(logs - logsumexp(logs, axis=0))
        out = np.zeros_like(x)
        for k in range(self.n_components):
            out -= resp[k][..., None] * ((x - self.means[k]) @ self.precisions[k])
        return out


def log_density(gmm, x):
    """Log of the mixture density at ``x`` (shape ``(..., dim)``)."""
    out = logsumexp(gmm.component_log_densities(x), axis=0)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class _RatioCoefficients:
    """log f(u) = logsumexp_k(-u.A_k.u / 2 + b_k.u + c_k)."""

    quad: np.ndarray
    lin: np.ndarray
    const: np.ndarray
    isotropic: np.ndarray

    @classmethod
    def build(cls, gmm, sigma):
        eye = np.eye(gmm.dim)
        quad = gmm.precisions - eye / sigma**2
        lin = np.einsum("kij,kj->ki", gmm.precisions, gmm.means)
        const = (
            np.log(gmm.weights)
            - 0.5 * np.einsum("ki,ki->k", gmm.means, lin)
            - 0.5 * gmm.logdets
            + gmm.dim * math.log(sigma)
        )
        iso = np.array([np.array_equal(q, q[0, 0] * eye) for q in quad])
        return cls(quad, lin, const, iso)

    def log_terms(self, u):
        terms = []
        for k in range(self.const.size):
            if self.isotropic[k]:
                qu = self.quad[k, 0, 0] * u
            else:
                qu = u @ self.quad[k]
            terms.append(-0.5 * np.sum(qu * u, axis=-1) + u @ self.lin[k] + self.const[k])
        return np.stack(terms)

    def log_value_and_grad_log(self, u):
        terms = self.log_terms(u)
        if terms.shape[0] == 1:
            log_val = terms[0]
            k = 0
            q = self.quad[k, 0, 0] * u if self.isotropic[k] else u @ self.quad[k]
            return log_val, self.lin[k] - q
        log_val = logsumexp(terms, axis=0)
        resp = np.exp(terms - log_val)
        grad = np.zeros_like(u)
        for k in range(self.const.size):
            q = self.quad[k, 0, 0] * u if self.isotropic[k] else u @ self.quad[k]
            grad += resp[k][..., None] * (self.lin[k] - q)
        return log_val, grad


@dataclass(frozen=True, eq=False)
class RadonNikodym:
    """Density ratio ``f = pi / N(0, sigma^2 I)`` with regularity metadata.

    ``L`` bounds the Lipschitz constants of ``f`` and its gradient on the
    ball of radius ``ball_radius`` and ``c`` bounds ``f`` from below there.
    Constants left as ``None`` are estimated with
    :func:`estimate_regularity`; supplied constants are checked against a
    probe set.
    """

    target: GaussianMixture
    sigma: float = 1.0
    L: float | None = None
    c: float | None = None
    ball_radius: float = 1.0
    probe_count: int = 2048
    probe_seed: int = 0
    _coef: _RatioCoefficients = field(init=False, repr=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractViolation(f"sigma must be positive, got {self.sigma}")
        if not self.ball_radius > 0:
            raise ContractViolation(f"ball_radius must be positive, got {self.ball_radius}")
        object.__setattr__(self, "_coef", _RatioCoefficients.build(self.target, self.sigma))
        given_L, given_c = self.L, self.c
        if given_L is None or given_c is None:
            L_est, c_est = estimate_regularity(self, self.probe_count, self.probe_seed)
            # f constant gives L_est = 0; keep L positive so 2L/c stays a valid clip level
            object.__setattr__(self, "L", max(float(L_est), MIN_LIPSCHITZ) if given_L is None else float(given_L))
            object.__setattr__(self, "c", float(c_est) if given_c is None else float(given_c))
        if not self.L > 0:
            raise ContractViolation(f"L must be positive, got {self.L}")
        if not 0 < self.c <= 1:
            raise ContractViolation(f"c must lie in (0, 1], got {self.c}")
        if given_L is not None or given_c is not None:
            self._check_constants(given_L, given_c)

    def _check_constants(self, given_L, given_c):
        probes = ball_probes(self.dim, self.ball_radius, 256, self.probe_seed)
        val, grad = self.value_and_grad(probes)
        if given_c is not None and val.min() < self.c - 1e-9:
            raise ContractViolation(f"f drops to {val.min():.6g} < c={self.c} inside the ball")
        if given_L is not None:
            lip = max(_max_difference_quotient(probes, val[:, None]), _max_difference_quotient(probes, grad))
            if lip > self.L + 1e-6:
                raise ContractViolation(f"observed Lipschitz ratio {lip:.6g} exceeds L={self.L}")

    @property
    def dim(self):
        return self.target.dim

    @property
    def clip_level(self):
        return 2.0 * self.L / self.c

    def log_value(self, x):
        x = self.target._check(x)
        return logsumexp(self._coef.log_terms(x), axis=0)

    def value_and_grad(self, x):
        """``f(x)`` and ``grad f(x)`` for points of shape ``(..., dim)``."""
        x = self.target._check(x)
        log_val, glog = self._coef.log_value_and_grad_log(x)
        if np.any(log_val > _MAX_LOG):
            bad = np.unravel_index(np.argmax(log_val), np.shape(log_val)) if np.ndim(log_val) else ()
            raise RangeError(f"density ratio overflows at x={np.asarray(x)[bad].tolist()}")
        val = np.exp(log_val)
        return val, val[..., None] * glog


def rnd_eval(rnd, x):
    """Value and gradient of the density ratio at a single point or batch."""
    val, grad = rnd.value_and_grad(x)
    if np.ndim(val) == 0:
        return float(val), grad
    return val, grad


def ball_probes(dim, radius, count, seed=0):
    """Deterministic low-discrepancy points in the closed ball.

    Scrambled Halton points in the bounding cube are kept when they fall
    inside the ball; the ``2 * dim`` axis poles are always included so that
    extrema attained on the boundary are seen.
    """
    poles = np.concatenate([np.eye(dim), -np.eye(dim)]) * radius
    need = max(count - poles.shape[0], 1)
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    kept = []
    n_kept = 0
    while n_kept < need:
        pts = (2.0 * sampler.random(2 * need) - 1.0) * radius
        pts = pts[np.linalg.norm(pts, axis=1) <= radius]
        kept.append(pts)
        n_kept += pts.shape[0]
    return np.concatenate([poles, np.concatenate(kept)[:need]])


def _max_difference_quotient(points, values, chunk=512):
    """max over pairs i<j of ||v_i - v_j|| / ||p_i - p_j||."""
    best = 0.0
    n = points.shape[0]
    for start in range(0, n, chunk):
        p = points[start : start + chunk]
        v = values[start : start + chunk]
        dist = np.linalg.norm(p[:, None, :] - points[None, :, :], axis=-1)
        dval = np.linalg.norm(v[:, None, :] - values[None, :, :], axis=-1)
        mask = dist > 0
        if np.any(mask):
            best = max(best, float(np.max(dval[mask] / dist[mask])))
    return best


def estimate_regularity(rnd, probe_count=2048, seed=0, radius=None):
    """Estimate ``(L, c)`` for a density ratio on a ball.

    ``c`` is 0.9 times the smallest probed value (floored at 1e-12 and capped
    at 1); ``L`` is 1.1 times the largest difference quotient of ``f`` and
    ``grad f`` over all probe pairs. ``rnd`` only needs ``value_and_grad``,
    ``dim`` and, when ``radius`` is omitted, ``ball_radius``.
    """
    radius = rnd.ball_radius if radius is None else radius
    probes = ball_probes(rnd.dim, radius, probe_count, seed)
    val, grad = rnd.value_and_grad(probes)
    c = min(max(0.9 * float(val.min()), 1e-12), 1.0)
    lip = max(_max_difference_quotient(probes, val[:, None]), _max_difference_quotient(probes, grad))
    return 1.1 * lip, c


def marginal_at(gmm, schedule, sigma, t):
    """Law of the forward VP-SDE at time ``t`` when started from ``gmm``."""
    if t < 0:
        raise ContractViolation(f"time must be non-negative, got {t}")
    lam = lambda_at(schedule, t)
    if lam == 0.0:
        return gmm
    keep = 1.0 - lam
    eye = np.eye(gmm.dim)
    covs = [keep * c + sigma**2 * lam * eye for c in gmm.covs]
    return GaussianMixture(gmm.weights, math.sqrt(keep) * gmm.means, covs)


def oracle_score(gmm, schedule, sigma, t, y):
    """Exact score of the time-``t`` marginal."""
    return marginal_at(gmm, schedule, sigma, t).score(y)


__all__ = [
    "GaussianMixture",
    "NoiseSchedule",
    "RadonNikodym",
    "ball_probes",
    "estimate_regularity",
    "log_density",
    "marginal_at",
    "oracle_score",
    "rnd_eval",
]
