"""Forward noising and Euler-Maruyama time reversal of the VP-SDE.

Forward SDE: dx = -beta_t x dt + sigma sqrt(2 beta_t) dB. Reverse-time
drifts take the reverse index ``t_rev`` in [0, T] and convert to forward
time ``T - t_rev`` internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import CapabilityError, ContractViolation, DivergenceError
from .schedule import NoiseSchedule, lambda_at
from .semigroup import drift_estimate
from .targets import GaussianMixture, marginal_at, oracle_score

INITS = ("reference_gaussian", "exact_pT")
# particles sharing one random stream; fixed so a particle's noise does not
# depend on how many particles are simulated
PARTICLE_BLOCK = 4096
MIN_STEPS = 10


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded states, ``states[k]`` holding all particles at ``times[k]``."""

    times: np.ndarray
    states: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ContractViolation("times and states differ in length")
        if self.times[0] != 0:
            raise ContractViolation("trajectory must start at time 0")


def forward_sample(schedule, sigma, x0, t, seed):
    """One exact draw from the transition kernel p_{t|0}(. | x0) per row of ``x0``."""
    lam = lambda_at(schedule, t)
    x0 = np.asarray(x0, dtype=float)
    if lam == 0.0:
        return x0.copy()
    noise = _rng.generator(seed, "forward").standard_normal(x0.shape)
    return math.sqrt(1.0 - lam) * x0 + sigma * math.sqrt(lam) * noise


class DriftField:
    """Base class for reverse-time drifts.

    Subclasses supply ``score(y, t_fwd)``, the score of the forward marginal,
    or override ``log_phi_grad``; the two are related by
    ``score = -y / sigma^2 + log_phi_grad``.
    """

    name = "drift"

    def __init__(self, schedule, sigma=1.0):
        if not sigma > 0:
            raise ContractViolation(f"sigma must be positive, got {sigma}")
        self.schedule = schedule
        self.sigma = float(sigma)

    def score(self, y, t_fwd):
        return -np.asarray(y) / self.sigma**2 + self.log_phi_grad(y, t_fwd)

    def log_phi_grad(self, y, t_fwd):
        return self.score(y, t_fwd) + np.asarray(y) / self.sigma**2

    def _beta_rev(self, t_rev):
        return self.schedule.beta_at(self.schedule.horizon - t_rev)

    def reverse_drift(self, y, t_rev):
        """beta_{T-t} (y + 2 sigma^2 score(y, T - t))."""
        t_fwd = self.schedule.horizon - t_rev
        y = np.asarray(y, dtype=float)
        return self._beta_rev(t_rev) * (y + 2.0 * self.sigma**2 * self.score(y, t_fwd))

    def value_function_drift(self, y, t_rev):
        """-beta_{T-t} (y - 2 sigma^2 grad log phi(y, T - t)), the same field."""
        t_fwd = self.schedule.horizon - t_rev
        y = np.asarray(y, dtype=float)
        return -self._beta_rev(t_rev) * (y - 2.0 * self.sigma**2 * self.log_phi_grad(y, t_fwd))


class ReferenceDrift(DriftField):
    name = "reference"

    def score(self, y, t_fwd):
        return -np.asarray(y, dtype=float) / self.sigma**2

    def log_phi_grad(self, y, t_fwd):
        return np.zeros_like(np.asarray(y, dtype=float))

    def reverse_drift(self, y, t_rev):
        return -self._beta_rev(t_rev) * np.asarray(y, dtype=float)


class OracleScoreDrift(DriftField):
    """Exact score of a Gaussian-mixture target pushed through the forward SDE."""

    name = "oracle_score"

    def __init__(self, target, schedule, sigma=1.0):
        super().__init__(schedule, sigma)
        self.target = target
        self._cache = {}

    def _marginal(self, t_fwd):
        key = float(t_fwd)
        m = self._cache.get(key)
        if m is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            m = self._cache[key] = marginal_at(self.target, self.schedule, self.sigma, key)
        return m

    def score(self, y, t_fwd):
        return self._marginal(t_fwd).score(y)


class SemigroupDrift(DriftField):
    """Clipped empirical-semigroup drift evaluated at OU time ``int_0^t beta``."""

    name = "semigroup_estimator"

    def __init__(self, estimator, schedule):
        super().__init__(schedule, estimator.rnd.sigma)
        self.estimator = estimator
        self.target = estimator.rnd.target

    def log_phi_grad(self, y, t_fwd):
        return drift_estimate(self.estimator, y, self.schedule.integral(t_fwd))


class VectorFieldDrift(DriftField):
    """User-supplied field ``fn(y, t_fwd)``.

    ``form`` says what ``fn`` returns: ``"score"``, ``"log_phi"`` (the
    gradient of log phi) or ``"drift"`` (the reverse drift itself, called
    with forward time like the others).
    """

    name = "custom"
    FORMS = ("score", "log_phi", "drift")

    def __init__(self, fn, schedule, sigma=1.0, form="log_phi"):
        super().__init__(schedule, sigma)
        if form not in self.FORMS:
            raise ContractViolation(f"form must be one of {self.FORMS}, got {form!r}")
        self.fn = fn
        self.form = form

    def score(self, y, t_fwd):
        if self.form == "score":
            return np.asarray(self.fn(y, t_fwd), dtype=float)
        if self.form == "log_phi":
            return -np.asarray(y) / self.sigma**2 + np.asarray(self.fn(y, t_fwd), dtype=float)
        beta = self.schedule.beta_at(t_fwd)
        b = np.asarray(self.fn(y, t_fwd), dtype=float)
        return (b / beta - np.asarray(y)) / (2.0 * self.sigma**2)

    def reverse_drift(self, y, t_rev):
        if self.form == "drift":
            return np.asarray(self.fn(y, self.schedule.horizon - t_rev), dtype=float)
        return super().reverse_drift(y, t_rev)


def reverse_drift(drift, y, t_rev):
    """Reverse-time drift b(y, t_rev) of a :class:`DriftField`."""
    if not 0 <= t_rev <= drift.schedule.horizon:
        raise ContractViolation(f"t_rev must lie in [0, {drift.schedule.horizon}], got {t_rev}")
    return drift.reverse_drift(y, t_rev)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    samples: np.ndarray
    paths: Trajectory | None
    seed: int
    n_steps: int


def _block_generators(seed, stream, n_particles):
    n_blocks = -(-n_particles // PARTICLE_BLOCK)
    return [_rng.generator(seed, stream, b) for b in range(n_blocks)]


def _block_normals(gens, n_particles, dim):
    draws = np.concatenate([g.standard_normal((PARTICLE_BLOCK, dim)) for g in gens])
    return draws[:n_particles]


def _initial_states(init, gens, n_particles, dim, sigma, schedule, target):
    if init == "reference_gaussian":
        return sigma * _block_normals(gens, n_particles, dim)
    if init == "exact_pT":
        if not isinstance(target, GaussianMixture):
            raise CapabilityError("init 'exact_pT' needs a Gaussian-mixture target")
        law = marginal_at(target, schedule, sigma, schedule.horizon)
        draws = np.concatenate([law.sample(g, PARTICLE_BLOCK) for g in gens])
        return draws[:n_particles]
    raise ContractViolation(f"init must be one of {INITS}, got {init!r}")


def simulate_reverse(
    schedule,
    sigma,
    drift,
    init="reference_gaussian",
    n_steps=100,
    n_particles=1000,
    seed=0,
    dim=None,
    target=None,
    record_paths=False,
    observer=None,
    stream="reverse",
):
    """Euler-Maruyama on a uniform grid for the reverse-time SDE.

    y_{k+1} = y_k + b(y_k, t_k) dt + sigma sqrt(2 beta_{T-t_k} dt) xi_k.

    ``observer(k, t_rev, y, b, dt)`` is called before every step with the
    drift already evaluated; estimators of path functionals hook in there.
    Particle ``i`` always draws from the stream of block
    ``i // PARTICLE_BLOCK``, so its path does not depend on ``n_particles``.
    """
    if n_steps < MIN_STEPS:
        raise ContractViolation(f"n_steps must be at least {MIN_STEPS}, got {n_steps}")
    if n_particles < 1:
        raise ContractViolation(f"n_particles must be positive, got {n_particles}")
    if target is None:
        target = getattr(drift, "target", None)
    if dim is None:
        if target is None:
            raise ContractViolation("dim is required when the drift carries no target")
        dim = target.dim
    gens = _block_generators(seed, stream, n_particles)
    y = _initial_states(init, gens, n_particles, dim, sigma, schedule, target)
    horizon = schedule.horizon
    dt = horizon / n_steps
    times = np.arange(n_steps + 1) * dt
    times[-1] = horizon
    states = np.empty((n_steps + 1, n_particles, dim)) if record_paths else None
    if record_paths:
        states[0] = y
    for k in range(n_steps):
        t_rev = times[k]
        b = drift.reverse_drift(y, t_rev)
        if observer is not None:
            observer(k, t_rev, y, b, dt)
        scale = sigma * math.sqrt(2.0 * schedule.beta_at(horizon - t_rev) * dt)
        y = y + b * dt + scale * _block_normals(gens, n_particles, dim)
        if not np.all(np.isfinite(y)):
            bad = int(np.argmax(~np.all(np.isfinite(y), axis=1)))
            raise DivergenceError(f"non-finite state at step {k + 1} (particle {bad})")
        if record_paths:
            states[k + 1] = y
    paths = Trajectory(times, states, seed) if record_paths else None
    return SimulationResult(y, paths, seed, n_steps)


__all__ = [
    "DriftField",
    "NoiseSchedule",
    "OracleScoreDrift",
    "ReferenceDrift",
    "SemigroupDrift",
    "SimulationResult",
    "Trajectory",
    "VectorFieldDrift",
    "forward_sample",
    "lambda_at",
    "reverse_drift",
    "simulate_reverse",
]
