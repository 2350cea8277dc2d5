"""Ornstein-Uhlenbeck semigroup: Monte-Carlo estimator, closed-form oracle,
heat-semigroup baseline and the clipped log-gradient drift.

Semigroup times are OU times (the clock with beta = 1). A general schedule
enters only through ``schedule.integral``, applied by the callers that take
a schedule argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from ._kernels import CloudQuadratics, ratio_cloud_moments
from .errors import CapabilityError, ContractViolation, ImprobableEventError, NumericError, RangeError
from .targets import GaussianMixture, RadonNikodym, _RatioCoefficients

MAX_CLOUD_ATTEMPTS = 100
# upper bound on (points x cloud x dim) doubles materialised at once
_CHUNK_ELEMENTS = 1 << 22


def cloud_radius_bound(dim, n):
    return 8.0 * math.sqrt((dim + 6) * math.log(n))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Fixed standard-normal points shared by every semigroup evaluation."""

    points: np.ndarray
    seed: int
    radius_bound: float
    attempts: int = 1

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def sample_cloud(dim, n, seed):
    """Draw ``n`` i.i.d. N(0, I) points, redrawing until all norms respect the bound."""
    if n < 2:
        raise ContractViolation(f"cloud needs at least 2 points, got {n}")
    bound = cloud_radius_bound(dim, n)
    for attempt in range(1, MAX_CLOUD_ATTEMPTS + 1):
        pts = _rng.generator(seed, "cloud", attempt).standard_normal((n, dim))
        if np.linalg.norm(pts, axis=1).max() <= bound:
            pts.setflags(write=False)
            return PointCloud(pts, seed, bound, attempt)
    raise ImprobableEventError(
        f"{MAX_CLOUD_ATTEMPTS} clouds of {n} normal points all exceeded radius {bound:.3f}"
    )


@dataclass(frozen=True, eq=False)
class SemigroupEstimator:
    cloud: PointCloud
    rnd: RadonNikodym
    clip_level: float | None = None

    def __post_init__(self):
        if self.cloud.dim != self.rnd.dim:
            raise ContractViolation("cloud and target dimensions differ")
        if self.clip_level is None:
            object.__setattr__(self, "clip_level", 2.0 * self.rnd.L / self.rnd.c)
        if not self.clip_level > 0:
            raise ContractViolation(f"clip_level must be positive, got {self.clip_level}")


@dataclass(frozen=True)
class SemigroupStats:
    """Sample means and Monte-Carlo standard errors at a batch of points.

    ``log_grad_se`` is the delta-method standard error of ``grad / value``.
    """

    value: np.ndarray
    grad: np.ndarray
    value_se: np.ndarray
    grad_se: np.ndarray
    log_grad_se: np.ndarray


def _flatten(x, t, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ContractViolation(f"expected points of dimension {dim}, got shape {x.shape}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ContractViolation(f"semigroup time must be non-negative, got {t}")
    batch = np.broadcast_shapes(x.shape[:-1], t.shape)
    xb = np.broadcast_to(x, batch + (dim,)).reshape(-1, dim)
    tb = np.broadcast_to(t, batch).reshape(-1)
    return xb, tb, batch


_QUAD_CACHE = {}


def _cloud_quadratics_cached(points, quad):
    # keyed on array identity; clouds are immutable and long-lived
    key = (id(points), quad.tobytes())
    hit = _QUAD_CACHE.get(key)
    if hit is None or hit[0] is not points:
        if len(_QUAD_CACHE) > 32:
            _QUAD_CACHE.clear()
        hit = (points, CloudQuadratics(points, quad))
        _QUAD_CACHE[key] = hit
    return hit[1]


def _cloud_stats(func, points, x, shift_scale, noise_scale, grad_scale):
    """Per-point first and second moments of ``f`` and ``grad f`` over the cloud.

    Evaluation point n for row m is ``shift_scale[m] * x[m] + noise_scale[m] * points[n]``.
    """
    owner = getattr(func, "__self__", None)
    if isinstance(owner, RadonNikodym):
        coef = owner._coef
        quadratics = _cloud_quadratics_cached(points, coef.quad)
        *moments, overflow = ratio_cloud_moments(
            np.ascontiguousarray(x), shift_scale, noise_scale, grad_scale,
            quadratics, coef.quad, coef.lin, coef.const,
        )
        if overflow:
            raise RangeError("density ratio overflows on a cloud argument")
        return tuple(moments)
    m_total, dim = x.shape
    n = points.shape[0]
    mean_f = np.empty(m_total)
    mean_g = np.empty((m_total, dim))
    var_f = np.empty(m_total)
    var_g = np.empty((m_total, dim))
    cov_fg = np.empty((m_total, dim))
    step = max(1, _CHUNK_ELEMENTS // (n * dim))
    for s in range(0, m_total, step):
        sl = slice(s, s + step)
        u = (shift_scale[sl, None] * x[sl])[:, None, :] + noise_scale[sl, None, None] * points[None, :, :]
        f, g = func(u)
        g = g * grad_scale[sl, None, None]
        mf = f.mean(axis=1)
        mg = g.mean(axis=1)
        df = f - mf[:, None]
        dg = g - mg[:, None, :]
        mean_f[sl] = mf
        mean_g[sl] = mg
        var_f[sl] = np.mean(df * df, axis=1)
        var_g[sl] = np.mean(dg * dg, axis=1)
        cov_fg[sl] = np.mean(df[..., None] * dg, axis=1)
    return mean_f, mean_g, var_f, var_g, cov_fg


def _stats(func, cloud, x, t, shift, noise, grad_scale, batch):
    m_total, dim = x.shape
    mf, vf = np.zeros(m_total), np.zeros(m_total)
    mg, vg, cfg = np.zeros((m_total, dim)), np.zeros((m_total, dim)), np.zeros((m_total, dim))
    still = noise == 0
    moving = ~still
    if np.any(moving):
        parts = _cloud_stats(func, cloud.points, np.ascontiguousarray(x[moving]), shift[moving], noise[moving],
                             grad_scale[moving])
        for dest, part in zip((mf, mg, vf, vg, cfg), parts):
            dest[moving] = part
    if np.any(still):
        # every cloud point lands on the same argument; no averaging needed
        f0, g0 = func(shift[still, None] * x[still])
        mf[still] = f0
        mg[still] = g0 * grad_scale[still, None]
    n = cloud.size
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = mg / mf[:, None]
        # delta method for a ratio of means
        vr = (vg - 2.0 * ratio * cfg + ratio**2 * vf[:, None]) / mf[:, None] ** 2
    vr = np.maximum(vr, 0.0)
    dim = x.shape[1]
    return SemigroupStats(
        value=mf.reshape(batch),
        grad=mg.reshape(batch + (dim,)),
        value_se=np.sqrt(vf / n).reshape(batch),
        grad_se=np.sqrt(vg / n).reshape(batch + (dim,)),
        log_grad_se=np.sqrt(vr / n).reshape(batch + (dim,)),
    )


def _ou_scales(t, sigma):
    shift = np.exp(-t)
    noise = sigma * np.sqrt(-np.expm1(-2.0 * t))
    return shift, noise


def ou_semigroup_stats(est, x, t):
    """Empirical OU semigroup with standard errors, see :func:`ou_semigroup_mc`."""
    xf, tf, batch = _flatten(x, t, est.rnd.dim)
    shift, noise = _ou_scales(tf, est.rnd.sigma)
    return _stats(est.rnd.value_and_grad, est.cloud, xf, tf, shift, noise, shift, batch)


def _scalarize(value, grad):
    if np.ndim(value) == 0:
        return float(value), np.asarray(grad)
    return value, grad


def ou_semigroup_mc(est, x, t):
    """Empirical OU semigroup applied to the density ratio.

    value = mean_n f(e^{-t} x + sigma sqrt(1 - e^{-2t}) z_n) and grad is the
    mean of ``grad f`` at the same arguments times ``e^{-t}``.
    """
    s = ou_semigroup_stats(est, x, t)
    return _scalarize(s.value, s.grad)


def heat_semigroup_stats(rnd, cloud, x, t):
    xf, tf, batch = _flatten(x, t, rnd.dim)
    ones = np.ones_like(tf)
    return _stats(rnd.value_and_grad, cloud, xf, tf, ones, np.sqrt(tf), ones, batch)


def heat_semigroup_mc(rnd, cloud, x, t):
    """Empirical heat semigroup mean_n f(x + sqrt(t) z_n) and its gradient.

    ``rnd`` may be any object exposing ``value_and_grad`` and ``dim``.
    """
    s = heat_semigroup_stats(rnd, cloud, x, t)
    return _scalarize(s.value, s.grad)


def _require_mixture(rnd):
    target = getattr(rnd, "target", None)
    if not isinstance(target, GaussianMixture):
        raise CapabilityError("closed-form semigroup requires a Gaussian-mixture target")
    return target


def _oracle_lambda(schedule, t):
    if schedule is None:
        return -math.expm1(-2.0 * t)
    return -math.expm1(-2.0 * schedule.integral(t))


def _oracle_log_terms(rnd, schedule, x, t):
    target = _require_mixture(rnd)
    lam = _oracle_lambda(schedule, t)
    if lam == 0.0:
        marg = target
    else:
        keep = 1.0 - lam
        eye = np.eye(target.dim)
        marg = GaussianMixture(
            target.weights, math.sqrt(keep) * target.means, [keep * c + rnd.sigma**2 * lam * eye for c in target.covs]
        )
    return _RatioCoefficients.build(marg, rnd.sigma).log_value_and_grad_log(np.asarray(x, dtype=float))


def _per_time(fn, rnd, schedule, x, t):
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ContractViolation(f"time must be non-negative, got {t}")
    if t.ndim == 0:
        return fn(rnd, schedule, x, float(t))
    batch = np.broadcast_shapes(x.shape[:-1], t.shape)
    xb = np.broadcast_to(x, batch + (x.shape[-1],))
    tb = np.broadcast_to(t, batch)
    outs = {}
    for tv in np.unique(tb):
        mask = tb == tv
        outs[tv] = (mask, fn(rnd, schedule, xb[mask], float(tv)))
    first = next(iter(outs.values()))[1]
    if isinstance(first, tuple):
        res = tuple(np.empty(batch + np.shape(a)[1:]) for a in first)
        for mask, vals in outs.values():
            for r, v in zip(res, vals):
                r[mask] = v
        return res
    res = np.empty(batch + np.shape(first)[1:])
    for mask, vals in outs.values():
        res[mask] = vals
    return res


def ou_semigroup_oracle(rnd, schedule, x, t):
    """Closed-form semigroup value p_t(x) / N(x; 0, sigma^2 I).

    With ``schedule=None`` the time is an OU time; otherwise it is a forward
    time of ``schedule``.
    """

    def one(rnd, schedule, x, t):
        return np.exp(_oracle_log_terms(rnd, schedule, x, t)[0])

    out = _per_time(one, rnd, schedule, x, t)
    return float(out) if np.ndim(out) == 0 else out


def ou_semigroup_oracle_log_grad(rnd, schedule, x, t):
    """Exact ``grad log U_t f`` (the value-function drift correction)."""
    return _per_time(lambda r, s, xx, tt: _oracle_log_terms(r, s, xx, tt)[1], rnd, schedule, x, t)


def ou_semigroup_oracle_grad(rnd, schedule, x, t):
    def one(rnd, schedule, x, t):
        log_val, glog = _oracle_log_terms(rnd, schedule, x, t)
        val = np.exp(log_val)
        return val[..., None] * glog

    return _per_time(one, rnd, schedule, x, t)


def log_gradient_mc(est, x, t):
    """Unclipped ratio ``grad / value`` of the empirical semigroup."""
    value, grad = ou_semigroup_mc(est, x, t)
    value = np.asarray(value)
    if np.any(value <= 0):
        xf, tf, _ = _flatten(x, t, est.rnd.dim)
        i = int(np.argmax(value.reshape(-1) <= 0))
        raise NumericError(f"empirical semigroup value {value.reshape(-1)[i]:.3g} <= 0 at x={xf[i].tolist()}, t={tf[i]}")
    return grad / value[..., None]


def clip(v, level):
    return np.minimum(np.maximum(v, -level), level)


def drift_estimate(est, x, t):
    """Clipped ``grad log`` of the empirical semigroup, each component in [-clip, clip]."""
    return clip(log_gradient_mc(est, x, t), est.clip_level)


def score_from_semigroup(est, schedule, sigma, y, t):
    """Score of the forward marginal at time ``t`` built from the empirical semigroup.

    grad log p_t(y) = -y / sigma^2 + grad log U_tau f(y), where tau is the OU
    time of ``t`` (``schedule.integral(t)``; ``t`` itself when ``schedule`` is
    None). Clipping touches only the semigroup part.
    """
    if not math.isclose(sigma, est.rnd.sigma, rel_tol=0, abs_tol=0):
        raise ContractViolation(f"sigma={sigma} differs from the estimator's reference scale {est.rnd.sigma}")
    tau = t if schedule is None else schedule.integral(t)
    y = np.asarray(y, dtype=float)
    return -y / sigma**2 + drift_estimate(est, y, tau)


__all__ = [
    "PointCloud",
    "SemigroupEstimator",
    "SemigroupStats",
    "cloud_radius_bound",
    "clip",
    "drift_estimate",
    "heat_semigroup_mc",
    "heat_semigroup_stats",
    "log_gradient_mc",
    "ou_semigroup_mc",
    "ou_semigroup_oracle",
    "ou_semigroup_oracle_grad",
    "ou_semigroup_oracle_log_grad",
    "ou_semigroup_stats",
    "sample_cloud",
    "score_from_semigroup",
]
