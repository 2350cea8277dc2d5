"""Noise schedules for the variance-preserving SDE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

MIN_TOTAL_NOISE = 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion clock ``beta_t`` on ``[0, horizon]``.

    ``kind`` is ``"constant"`` (uses ``beta``) or ``"linear"`` (ramps from
    ``beta_min`` to ``beta_max``). A warning is emitted when the integrated
    noise over the horizon is below ``MIN_TOTAL_NOISE``, because the terminal
    marginal is then far from the reference Gaussian.
    """

    kind: str = "constant"
    beta: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.horizon <= 0 or not math.isfinite(self.horizon):
            raise ContractViolation(f"horizon must be positive and finite, got {self.horizon}")
        if self.kind == "constant":
            if not self.beta > 0:
                raise ContractViolation(f"beta must be positive, got {self.beta}")
        elif self.kind == "linear":
            if not (self.beta_min > 0 and self.beta_max > 0):
                raise ContractViolation("beta_min and beta_max must be positive")
            if self.beta_min > self.beta_max:
                raise ContractViolation(
                    f"linear schedule must be non-decreasing: beta_min={self.beta_min} > beta_max={self.beta_max}"
                )
        else:
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if self.integral(self.horizon) < MIN_TOTAL_NOISE:
            warnings.warn(
                f"integrated noise {self.integral(self.horizon):.3g} < {MIN_TOTAL_NOISE}; "
                "terminal marginal may be far from the reference Gaussian",
                stacklevel=2,
            )

    @classmethod
    def constant(cls, beta=1.0, horizon=1.0):
        return cls(kind="constant", beta=beta, horizon=horizon)

    @classmethod
    def linear(cls, beta_min, beta_max, horizon=1.0):
        return cls(kind="linear", beta_min=beta_min, beta_max=beta_max, horizon=horizon)

    def _check_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon * (1 + 1e-12)) or not np.all(np.isfinite(t)):
            raise ContractViolation(f"time must lie in [0, {self.horizon}], got {t}")
        return t

    def beta_at(self, t):
        t = self._check_time(t)
        if self.kind == "constant":
            out = np.full_like(t, self.beta)
        else:
            out = self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
        return out if out.ndim else float(out)

    def integral(self, t):
        """Integrated clock ``int_0^t beta_s ds`` (the OU-time of forward time ``t``)."""
        t = self._check_time(t)
        if self.kind == "constant":
            out = self.beta * t
        else:
            out = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2 / self.horizon
        return out if out.ndim else float(out)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "beta": self.beta, "horizon": self.horizon}
        return {"kind": "linear", "beta_min": self.beta_min, "beta_max": self.beta_max, "horizon": self.horizon}


def lambda_at(schedule, t):
    """Noise fraction ``1 - exp(-2 int_0^t beta_s ds)``, in ``[0, 1)``."""
    out = -np.expm1(-2.0 * np.asarray(schedule.integral(t)))
    return out if out.ndim else float(out)
