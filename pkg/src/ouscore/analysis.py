"""The rho_OU metric, greedy covering numbers and numerical checks of the
regularity properties of the semigroup class.

Deterministic checks use an absolute slack of 1e-9; Monte-Carlo checks
allow three standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from ._kernels import ou_greedy_cover
from .errors import ContractViolation
from .semigroup import (
    ou_semigroup_oracle,
    ou_semigroup_oracle_grad,
    ou_semigroup_oracle_log_grad,
    ou_semigroup_stats,
    drift_estimate,
)
from .targets import estimate_regularity

DET_SLACK = 1e-9
MC_SLACK_SE = 3.0
COVER_CANDIDATES = 512
COVER_COUNT_BUDGET = 4096


@dataclass(frozen=True)
class OuPoint:
    """A time-space pair ``(t, x)``."""

    t: float
    x: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x", x)
        if not (math.isfinite(self.t) and self.t >= 0) or not np.all(np.isfinite(x)):
            raise ContractViolation(f"invalid time-space point t={self.t}, x={x}")

    @classmethod
    def within(cls, t, x, radius, horizon):
        """Build a point and check it lies in [0, horizon] x B(radius)."""
        p = cls(float(t), x)
        if p.t > horizon or np.linalg.norm(p.x) > radius + 1e-12:
            raise ContractViolation(f"point (t={p.t}, |x|={np.linalg.norm(p.x):.6g}) outside [0,{horizon}] x B({radius})")
        return p


@dataclass(frozen=True)
class CoverReport:
    epsilon: float
    cover_size: int
    product_bound: int
    holds: bool
    interval_factor: int = 0
    ball_factor: int = 0
    resolution: float = 0.0
    refined: bool = False

    def __post_init__(self):
        if self.holds != (self.cover_size <= self.product_bound):
            raise ContractViolation("holds must equal cover_size <= product_bound")


def rho_ou_arrays(t1, x1, t2, x2):
    """Vectorised ||e^{-t1} x1 - e^{-t2} x2|| + |t1 - t2|^(1/2)."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    diff = np.exp(-t1)[..., None] * np.asarray(x1, dtype=float) - np.exp(-t2)[..., None] * np.asarray(x2, dtype=float)
    return np.linalg.norm(diff, axis=-1) + np.sqrt(np.abs(t1 - t2))


def rho_ou(a, b):
    """rho_OU((t, x), (t', x')) = ||e^{-t} x - e^{-t'} x'|| + |t - t'|^(1/2)."""
    if a.x.shape != b.x.shape:
        raise ContractViolation("points have different dimensions")
    return float(np.linalg.norm(math.exp(-a.t) * a.x - math.exp(-b.t) * b.x) + math.sqrt(abs(a.t - b.t)))


def uniform_ball(rng, n, dim, radius):
    """``n`` points uniform in the closed ball of radius ``radius``."""
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * (radius * rng.random(n) ** (1.0 / dim))[:, None]


def verify_metric_axioms(d, R, T, trials=100_000, seed=0):
    """Count violations of the metric axioms over random triples.

    Checks exact symmetry, rho(a, a) = 0, rho(a, a') > 0 for a small
    perturbation a' of a, and the triangle inequality with 1e-12 slack.
    """
    rng = _rng.generator(seed, "metric_axioms")
    pts = [(T * rng.random(trials), uniform_ball(rng, trials, d, R)) for _ in range(3)]
    (ta, xa), (tb, xb), (tc, xc) = pts
    ab = rho_ou_arrays(ta, xa, tb, xb)
    ba = rho_ou_arrays(tb, xb, ta, xa)
    bc = rho_ou_arrays(tb, xb, tc, xc)
    ac = rho_ou_arrays(ta, xa, tc, xc)
    violations = int(np.count_nonzero(ab != ba))
    violations += int(np.count_nonzero(ac > ab + bc + 1e-12))
    violations += int(np.count_nonzero(rho_ou_arrays(ta, xa, ta, xa) != 0))
    # perturb either the time or one coordinate
    h = 1e-6
    dt = np.where(rng.random(trials) < 0.5, h, 0.0)
    dx = np.zeros_like(xa)
    dx[np.arange(trials), rng.integers(0, d, trials)] = np.where(dt == 0, h, 0.0)
    violations += int(np.count_nonzero(rho_ou_arrays(ta, xa, ta + dt, xa + dx) <= 0))
    return violations


def greedy_cover(points, metric, epsilon, n_candidates=COVER_CANDIDATES):
    """Size of a greedy cover of a finite point set by closed epsilon-balls.

    Each round takes the first uncovered point and, among up to
    ``n_candidates`` points of its epsilon-ball, centres the new ball where
    it covers the most uncovered points. ``metric(P, q)`` returns the
    distances from every row of ``P`` to ``q``. The proxy set should be a
    delta-net of the space with delta <= epsilon / 10 for the count to
    bound the covering number of the space itself.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if n == 0:
        return 0
    tol = 1e-12
    covered = np.zeros(n, dtype=bool)
    count = 0
    i = 0
    while True:
        while i < n and covered[i]:
            i += 1
        if i == n:
            return count
        cand = np.flatnonzero(metric(points, points[i]) <= epsilon + tol)
        if cand.size > n_candidates:
            cand = cand[(np.arange(n_candidates) * (cand.size - 1)) // (n_candidates - 1)]
        uncovered = np.flatnonzero(~covered)
        best, best_hits = None, -1
        for c in cand:
            hits = uncovered[metric(points[uncovered], points[c]) <= epsilon + tol]
            if hits.size > best_hits:
                best, best_hits = hits, hits.size
        covered[best] = True
        count += 1


def _grid(lo, hi, h):
    m = int(round((hi - lo) / h))
    return lo + (hi - lo) * np.arange(m + 1) / m


def _ball_grid(d, R, h):
    axis = _grid(-R, R, h)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return mesh[np.linalg.norm(mesh, axis=1) <= R + 1e-12]


def ou_product_cover(d, R, T, epsilon, resolution=0.01, n_candidates=COVER_CANDIDATES):
    """Greedy cover size of the grid proxy of [0, T] x B^d(R) under rho_OU."""
    xs = _ball_grid(d, R, resolution)
    ts = _grid(0.0, T, resolution)
    t = np.repeat(ts, xs.shape[0])
    ex = np.exp(-t)[:, None] * np.tile(xs, (ts.size, 1))
    return int(ou_greedy_cover(t, np.ascontiguousarray(ex), float(epsilon), n_candidates, COVER_COUNT_BUDGET))


def ball_cover(d, R, radius, resolution=0.01, n_candidates=COVER_CANDIDATES):
    """Covering count of B^d(R) by Euclidean balls: exact in one dimension,
    greedy on a grid proxy otherwise."""
    if d == 1:
        return math.ceil(2 * R / (2 * radius) - 1e-12)
    xs = np.ascontiguousarray(_ball_grid(d, R, resolution))
    return int(ou_greedy_cover(np.zeros(xs.shape[0]), xs, float(radius), n_candidates, COVER_COUNT_BUDGET))


def interval_cover(T, radius):
    """Exact covering count of [0, T] by intervals of half-width ``radius``."""
    return max(1, math.ceil(T / (2 * radius) - 1e-12))


def verify_covering_product(d, R, T, epsilons, resolution=0.01):
    """Check N(prod, rho_OU, eps) <= N([0,T], eps^2/4) N(B^d(R), eps/2) for each eps.

    The left side is a greedy count on a grid proxy; if the inequality
    fails it is recounted once on a proxy of half the spacing. A cover at a
    smaller epsilon also covers at a larger one, so each count is capped by
    the counts at smaller epsilons (raw greedy counts are not monotone).
    Reports come back in the order of ``epsilons``.
    """
    if d not in (1, 2):
        raise ContractViolation(f"covering checks support d in {{1, 2}}, got {d}")
    for eps in epsilons:
        if not 0 < eps <= 1:
            raise ContractViolation(f"epsilon must lie in (0, 1], got {eps}")
    by_eps = {}
    best = None
    for eps in sorted(set(float(e) for e in epsilons)):
        ivl = interval_cover(T, eps**2 / 4)
        ball = ball_cover(d, R, eps / 2, resolution)
        bound = ivl * ball
        h = resolution
        size = ou_product_cover(d, R, T, eps, h)
        refined = False
        if best is not None:
            size = min(size, best)
        if size > bound:
            refined = True
            h = resolution / 2
            size = min(size, ou_product_cover(d, R, T, eps, h))
        best = size
        by_eps[eps] = CoverReport(eps, size, bound, size <= bound, ivl, ball, h, refined)
    return [by_eps[float(e)] for e in epsilons]


def _lipschitz_on(g, radius, probe_count, seed):
    return estimate_regularity(g, probe_count, seed, radius=radius)[0]


def _semigroup_args(rnd, t, x, z):
    """Arguments e^{-t} x + sigma sqrt(1 - e^{-2t}) z, broadcast over z rows."""
    shift = np.exp(-t)
    noise = rnd.sigma * np.sqrt(-np.expm1(-2.0 * t))
    return shift * x + noise * z


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    violations: int
    lipschitz: float


def verify_l2_lipschitz(rnd, pairs=200, mc_draws=10_000, seed=0, horizon=1.0, lipschitz=None):
    """Check ||g_{t,x} - g_{t',x'}||_{L2} <= L (1 + sigma sqrt(2d)) rho_OU on random pairs.

    ``g_{t,x}(z) = f(e^{-t} x + sigma sqrt(1 - e^{-2t}) z)``; both members of
    a pair share the same ``z`` draws. ``L`` defaults to an estimate on the
    ball reached by the arguments, radius R + sigma max ||z||. A pair is a
    violation when the norm estimate minus three standard errors still
    exceeds the bound.
    """
    if mc_draws < 10_000:
        raise ContractViolation(f"mc_draws must be at least 10^4, got {mc_draws}")
    d, R = rnd.dim, rnd.ball_radius
    rng = _rng.generator(seed, "l2_lipschitz")
    z = rng.standard_normal((mc_draws, d))
    t1, t2 = horizon * rng.random(pairs), horizon * rng.random(pairs)
    x1, x2 = uniform_ball(rng, pairs, d, R), uniform_ball(rng, pairs, d, R)
    if lipschitz is None:
        reach = R + rnd.sigma * float(np.linalg.norm(z, axis=1).max())
        lipschitz = _lipschitz_on(rnd, reach, 4096, seed)
    factor = lipschitz * (1.0 + rnd.sigma * math.sqrt(2.0 * d))
    max_ratio, violations = 0.0, 0
    for p in range(pairs):
        g1 = rnd.value_and_grad(_semigroup_args(rnd, t1[p], x1[p], z))[0]
        g2 = rnd.value_and_grad(_semigroup_args(rnd, t2[p], x2[p], z))[0]
        sq = (g1 - g2) ** 2
        norm = math.sqrt(sq.mean())
        se = sq.std(ddof=1) / math.sqrt(mc_draws) / (2.0 * norm) if norm > 0 else 0.0
        bound = factor * float(rho_ou_arrays(t1[p], x1[p], t2[p], x2[p]))
        if bound > 0:
            max_ratio = max(max_ratio, norm / bound)
        if norm - MC_SLACK_SE * se > bound + DET_SLACK:
            violations += 1
    return LipschitzReport(max_ratio, violations, float(lipschitz))


@dataclass(frozen=True)
class EnvelopeReport:
    violations: int
    max_ratio: float
    lipschitz: float


def verify_envelope(rnd, R=None, samples=1_000_000, seed=0, horizon=1.0, lipschitz=None, batch=100_000):
    """Check |g(e^{-t} x + sigma sqrt(1 - e^{-2t}) z) - g(0)| <= L((R v 1) + sqrt(2) sigma ||z||).

    ``g`` is the density ratio ``rnd`` (anything with ``value_and_grad`` and
    ``dim``). ``L`` defaults to an estimate on the ball reached by the
    arguments.
    """
    if samples < 100_000:
        raise ContractViolation(f"samples must be at least 10^5, got {samples}")
    R = rnd.ball_radius if R is None else R
    d = rnd.dim
    rng = _rng.generator(seed, "envelope")
    t = horizon * rng.random(samples)
    x = uniform_ball(rng, samples, d, R)
    z = rng.standard_normal((samples, d))
    znorm = np.linalg.norm(z, axis=1)
    if lipschitz is None:
        lipschitz = _lipschitz_on(rnd, R + rnd.sigma * float(znorm.max()), 4096, seed)
    g0 = float(rnd.value_and_grad(np.zeros(d))[0])
    violations, max_ratio = 0, 0.0
    for start in range(0, samples, batch):
        sl = slice(start, start + batch)
        u = _semigroup_args(rnd, t[sl, None], x[sl], z[sl])
        lhs = np.abs(rnd.value_and_grad(u)[0] - g0)
        env = lipschitz * (max(R, 1.0) + math.sqrt(2.0) * rnd.sigma * znorm[sl])
        violations += int(np.count_nonzero(lhs > env + DET_SLACK))
        max_ratio = max(max_ratio, float(np.max(lhs / env)))
    return EnvelopeReport(violations, max_ratio, float(lipschitz))


def verify_commutation(est, probes=50, seed=0, step=1e-5, horizon=1.0):
    """Max relative gap between central differences of the empirical
    semigroup value and its analytic gradient (same cloud on both sides).

    The gap at a probe is ||fd - grad|| / max(||grad||, |value|).
    """
    if probes < 10:
        raise ContractViolation(f"probes must be at least 10, got {probes}")
    d = est.rnd.dim
    rng = _rng.generator(seed, "commutation")
    x = uniform_ball(rng, probes, d, est.rnd.ball_radius)
    t = horizon * (1.0 - rng.random(probes))
    shifts = np.concatenate([np.zeros((1, d)), step * np.eye(d), -step * np.eye(d)])
    xs = x[:, None, :] + shifts[None, :, :]
    s = ou_semigroup_stats(est, xs, t[:, None])
    value, grad = s.value[:, 0], s.grad[:, 0]
    fd = (s.value[:, 1 : d + 1] - s.value[:, d + 1 :]) / (2.0 * step)
    gap = np.linalg.norm(fd - grad, axis=1)
    scale = np.maximum(np.linalg.norm(grad, axis=1), np.abs(value))
    rel = np.where(gap == 0, 0.0, gap / np.where(scale > 0, scale, 1.0))
    return float(rel.max())


def verification_grid(dim, radius=1.0, n_x=21, n_t=21, horizon=1.0):
    """Grid of (x, t) on the diagonal segment of B^d(radius) times [0, horizon].

    x = r (1, ..., 1) / sqrt(dim) with r evenly spaced in [-radius, radius].
    Returns ``(x, t)`` of shapes ``(n_t, n_x, dim)`` and ``(n_t, n_x)``.
    """
    r = np.linspace(-radius, radius, n_x)
    x = r[:, None] * np.ones(dim) / math.sqrt(dim)
    t = np.linspace(0.0, horizon, n_t)
    return np.broadcast_to(x[None], (n_t, n_x, dim)).copy(), np.broadcast_to(t[:, None], (n_t, n_x)).copy()


@dataclass(frozen=True)
class SupErrorReport:
    sup_value_err: float
    sup_grad_err: float
    max_value_z: float
    max_value_se: float
    max_grad_se: float


def _max_ratio(err, se):
    # 0/0 (exact agreement with zero spread, e.g. t = 0) counts as 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(err == 0, 0.0, err / se)
    return float(ratio.max())


def sup_error_report(est, x, t, oracle_value=None, oracle_grad=None):
    """Sup over a grid of |phi_hat - U_t f| and ||grad phi_hat - grad U_t f||.

    Oracles default to the closed-form semigroup (times are OU times).
    ``max_value_z`` is the largest pointwise error in standard errors.
    """
    if oracle_value is None:
        oracle_value = ou_semigroup_oracle(est.rnd, None, x, t)
    if oracle_grad is None:
        oracle_grad = ou_semigroup_oracle_grad(est.rnd, None, x, t)
    s = ou_semigroup_stats(est, x, t)
    verr = np.abs(s.value - oracle_value)
    gerr = np.linalg.norm(s.grad - oracle_grad, axis=-1)
    return SupErrorReport(
        float(verr.max()), float(gerr.max()), _max_ratio(verr, s.value_se),
        float(s.value_se.max()), float(np.linalg.norm(s.grad_se, axis=-1).max()),
    )


@dataclass(frozen=True)
class DriftRegularityReport:
    max_norm: float
    norm_bound: float
    max_quotient: float
    quotient_bound: float
    max_clipped: float
    clip_level: float
    holds: bool


def verify_drift_regularity(est, x, t):
    """Check ||grad log U_t f|| <= L/c, its difference quotients <= L/c + L^2/c^2
    over all grid pairs at equal time, and |clipped drift| <= 2L/c.

    Quotients are taken in x at each fixed t, the Lipschitz statement being
    one in space. ``x`` has shape ``(n_t, n_x, d)`` and ``t`` ``(n_t, n_x)``.
    """
    rnd = est.rnd
    L, c = rnd.L, rnd.c
    v = ou_semigroup_oracle_log_grad(rnd, None, x, t)
    norms = np.linalg.norm(v, axis=-1)
    quotient = 0.0
    for row in range(x.shape[0]):
        dx = np.linalg.norm(x[row][:, None] - x[row][None], axis=-1)
        dv = np.linalg.norm(v[row][:, None] - v[row][None], axis=-1)
        mask = dx > 0
        if np.any(mask):
            quotient = max(quotient, float(np.max(dv[mask] / dx[mask])))
    clipped = float(np.abs(drift_estimate(est, x, t)).max())
    nb, qb = L / c + 1e-6, L / c + (L / c) ** 2 + 1e-6
    holds = float(norms.max()) <= nb and quotient <= qb and clipped <= est.clip_level
    return DriftRegularityReport(float(norms.max()), nb, quotient, qb, clipped, est.clip_level, holds)


__all__ = [
    "CoverReport",
    "DriftRegularityReport",
    "EnvelopeReport",
    "LipschitzReport",
    "OuPoint",
    "SupErrorReport",
    "ball_cover",
    "greedy_cover",
    "interval_cover",
    "ou_product_cover",
    "rho_ou",
    "rho_ou_arrays",
    "sup_error_report",
    "uniform_ball",
    "verification_grid",
    "verify_commutation",
    "verify_covering_product",
    "verify_drift_regularity",
    "verify_envelope",
    "verify_l2_lipschitz",
    "verify_metric_axioms",
]
