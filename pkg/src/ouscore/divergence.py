"""KL estimators: closed-form Gaussian KL, Girsanov path KL between two
reverse-time drifts, the reverse-KL (half-bridge) objective and the
exponential mixing bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateDataError
from .sde import VectorFieldDrift, simulate_reverse
from .targets import GaussianMixture, log_density

MIN_PROXY_SAMPLES = 1000


@dataclass(frozen=True)
class KlBudget:
    """e^{-T} KL(pi || N(0, I)) + T eps, split into its two terms."""

    mixing_term: float
    drift_term: float
    total: float

    def __post_init__(self):
        if self.mixing_term < 0 or self.drift_term < 0:
            raise ContractViolation("budget terms must be non-negative")
        if not math.isclose(self.total, self.mixing_term + self.drift_term, rel_tol=1e-12, abs_tol=1e-15):
            raise ContractViolation("total must equal mixing_term + drift_term")


def _spd_cholesky(cov, name):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ContractViolation(f"{name} is not symmetric positive definite") from None


def _as_gaussian(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(mean.size)
    elif cov.ndim == 1:
        cov = np.diag(cov)
    if cov.shape != (mean.size, mean.size):
        raise ContractViolation(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ContractViolation("covariance is not symmetric")
    return mean, cov


def gaussian_kl(mean1, cov1, mean2, cov2):
    """KL(N(mean1, cov1) || N(mean2, cov2)).

    Scalar covariances are isotropic and vectors are diagonals.
    """
    m1, s1 = _as_gaussian(mean1, cov1)
    m2, s2 = _as_gaussian(mean2, cov2)
    if m1.size != m2.size:
        raise ContractViolation("the two Gaussians have different dimensions")
    l1 = _spd_cholesky(s1, "cov1")
    l2 = _spd_cholesky(s2, "cov2")
    a = np.linalg.solve(l2, l1)
    diff = np.linalg.solve(l2, m2 - m1)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(l2))) - np.sum(np.log(np.diag(l1))))
    kl = 0.5 * (np.sum(a * a) + diff @ diff - m1.size + logdet_ratio)
    return max(float(kl), 0.0)


def _mean_and_se(per_path):
    n = per_path.size
    se = float(per_path.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return float(per_path.mean()), se


def girsanov_path_kl(schedule, sigma, drift_a, drift_b, init="reference_gaussian", n_paths=1000, n_steps=100,
                     seed=0, dim=None, target=None):
    """Path KL of the ``drift_a`` process against the ``drift_b`` process.

    KL = E_a int ||b_a - b_b||^2 / (2 g_t^2) dt with g_t = sigma sqrt(2 beta_t),
    accumulated on the Euler grid along paths of the ``a`` process.
    Returns ``(estimate, std_error)``.
    """
    acc = np.zeros(n_paths)

    def observe(k, t_rev, y, b_a, dt):
        g2 = 2.0 * sigma**2 * schedule.beta_at(schedule.horizon - t_rev)
        diff = b_a - drift_b.reverse_drift(y, t_rev)
        acc[:] += np.sum(diff * diff, axis=1) * (dt / (2.0 * g2))

    simulate_reverse(schedule, sigma, drift_a, init, n_steps, n_paths, seed, dim=dim, target=target,
                     observer=observe, stream="girsanov")
    return _mean_and_se(acc)


def _log_target(target):
    if isinstance(target, GaussianMixture):
        return lambda y: log_density(target, y)
    if callable(target):
        return target
    raise ContractViolation("target must be a GaussianMixture or a log-density callable")


def reverse_kl_objective(schedule, sigma, f_theta, target, n_paths=1000, n_steps=100, seed=0, dim=None):
    """Half-bridge objective of a candidate drift ``f_theta(y, t_fwd)``.

    Paths follow dy = -beta (y - 2 sigma^2 f_theta) dt + sigma sqrt(2 beta) dW
    from N(0, sigma^2 I); the cost is sigma^2 int beta ||f_theta||^2 dt plus
    log N(y_T; 0, sigma^2 I) - log pi(y_T). ``target`` is a mixture or an
    unnormalised log-density; in the latter case the estimate is only known
    up to adding log Z. Returns ``(estimate, std_error)``.
    """
    if dim is None:
        if not isinstance(target, GaussianMixture):
            raise ContractViolation("dim is required for a callable target")
        dim = target.dim
    log_pi = _log_target(target)
    drift = VectorFieldDrift(f_theta, schedule, sigma, form="log_phi")
    running = np.zeros(n_paths)

    def observe(k, t_rev, y, b, dt):
        t_fwd = schedule.horizon - t_rev
        f = np.asarray(f_theta(y, t_fwd), dtype=float)
        running[:] += sigma**2 * schedule.beta_at(t_fwd) * np.sum(f * f, axis=1) * dt

    res = simulate_reverse(schedule, sigma, drift, "reference_gaussian", n_steps, n_paths, seed, dim=dim,
                           observer=observe, stream="reverse_kl")
    y = res.samples
    log_ref = -0.5 * np.sum(y * y, axis=1) / sigma**2 - 0.5 * dim * math.log(2.0 * math.pi * sigma**2)
    return _mean_and_se(running + log_ref - np.asarray(log_pi(y), dtype=float))


def mixing_bound(T, kl0, epsilon):
    """e^{-T} kl0 + T epsilon as a :class:`KlBudget`."""
    if kl0 < 0 or epsilon < 0 or T < 0:
        raise ContractViolation("T, kl0 and epsilon must be non-negative")
    mixing = math.exp(-T) * kl0
    drift = T * epsilon
    return KlBudget(mixing, drift, mixing + drift)


def empirical_marginal_kl(samples, reference):
    """Moment-matched Gaussian proxy of KL(law(samples) || reference).

    ``reference`` is a mixture (replaced by its own moment-matched Gaussian,
    exact for a single component) or a ``(mean, cov)`` pair. The proxy is
    exact only when both laws are Gaussian.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] < MIN_PROXY_SAMPLES:
        raise ContractViolation(f"need at least {MIN_PROXY_SAMPLES} samples, got {samples.shape[0]}")
    if isinstance(reference, GaussianMixture):
        ref_mean, ref_cov = reference.mean(), reference.covariance()
    else:
        ref_mean, ref_cov = reference
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    if not np.all(np.isfinite(cov)) or np.linalg.matrix_rank(cov) < cov.shape[0]:
        raise DegenerateDataError("sample covariance is singular")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateDataError("sample covariance is not positive definite") from None
    return gaussian_kl(mean, cov, ref_mean, ref_cov)


__all__ = [
    "KlBudget",
    "empirical_marginal_kl",
    "gaussian_kl",
    "girsanov_path_kl",
    "mixing_bound",
    "reverse_kl_objective",
]
