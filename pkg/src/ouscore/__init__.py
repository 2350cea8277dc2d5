"""Reverse-time VP-SDE sampling with an empirical Ornstein-Uhlenbeck
semigroup drift, closed-form Gaussian-mixture oracles, and numerical
checks of the regularity, covering and KL bounds behind the construction.
"""

from .errors import (
    CapabilityError,
    ContractViolation,
    DegenerateDataError,
    DivergenceError,
    ImprobableEventError,
    NumericError,
    OuscoreError,
    RangeError,
)
from .schedule import NoiseSchedule, lambda_at
from .targets import GaussianMixture, RadonNikodym, estimate_regularity, log_density, marginal_at, oracle_score, rnd_eval
from .semigroup import (
    PointCloud,
    SemigroupEstimator,
    drift_estimate,
    heat_semigroup_mc,
    ou_semigroup_mc,
    ou_semigroup_oracle,
    sample_cloud,
    score_from_semigroup,
)
from .sde import (
    OracleScoreDrift,
    ReferenceDrift,
    SemigroupDrift,
    Trajectory,
    VectorFieldDrift,
    forward_sample,
    reverse_drift,
    simulate_reverse,
)
from .divergence import (
    KlBudget,
    empirical_marginal_kl,
    gaussian_kl,
    girsanov_path_kl,
    mixing_bound,
    reverse_kl_objective,
)

__version__ = "0.1.0"
