"""Experiment configuration: TOML ingestion, overrides and validation."""

from __future__ import annotations

import copy
import math
import os
import sys
from dataclasses import dataclass, field, fields
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ContractViolation
from .schedule import NoiseSchedule
from .targets import GaussianMixture

OUTPUT_DIR_ENV = "OUSCORE_OUTPUT_DIR"
DRIFTS = ("oracle_score", "semigroup_estimator", "reference")
INITS = ("reference_gaussian", "exact_pT")

# key -> default; "target" and "schedule" are tables handled separately
DEFAULTS = {
    "sigma": 1.0,
    "horizon": 4.0,
    "n_steps": 400,
    "n_particles": 100_000,
    "cloud_size": 10_000,
    "ball_radius": 1.0,
    "seed": 0,
    "output_dir": "ouscore-out",
    "drift": "oracle_score",
    "init": "reference_gaussian",
    "epsilons": [0.3, 0.5, 0.8],
    "horizons": [1.0, 2.0, 4.0],
    "grid_size": 21,
    "record_paths": False,
    "cover_horizon": 1.0,
    "L": None,
    "c": None,
    "clip_level": None,
}
SCHEDULE_DEFAULTS = {"kind": "constant", "beta": 1.0}
SCHEDULE_KEYS = {"constant": {"kind", "beta"}, "linear": {"kind", "beta_min", "beta_max"}}
COMPONENT_KEYS = {"weight", "mean", "cov"}


class ConfigError(ContractViolation):
    """Unreadable or invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    target: GaussianMixture
    schedule: NoiseSchedule
    sigma: float
    horizon: float
    n_steps: int
    n_particles: int
    cloud_size: int
    ball_radius: float
    seed: int
    output_dir: str
    drift: str
    init: str
    epsilons: list
    horizons: list
    grid_size: int
    record_paths: bool
    cover_horizon: float
    L: float | None
    c: float | None
    clip_level: float | None
    defaults_used: list = field(default_factory=list)

    @property
    def dim(self):
        return self.target.dim

    def to_dict(self):
        """Plain-data echo of every setting, defaults included."""
        out = {}
        for f in fields(self):
            if f.name in ("target", "schedule", "defaults_used"):
                continue
            out[f.name] = getattr(self, f.name)
        out["target"] = {"components": self.target.to_spec()}
        sched = self.schedule.to_dict()
        sched.pop("horizon")
        out["schedule"] = sched
        out["defaults_used"] = list(self.defaults_used)
        return out


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``key=value`` strings (dotted keys reach into tables)."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = _parse_value(text.strip())
    return raw


def _require(cond, name, constraint):
    if not cond:
        raise ConfigError(f"invalid {name!r}: must be {constraint}")


def _number(raw, name, integer=False):
    v = raw[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"invalid {name!r}: expected a number, got {v!r}")
    if integer:
        _require(float(v).is_integer(), name, "an integer")
        return int(v)
    _require(math.isfinite(v), name, "finite")
    return float(v)


def _build_target(raw):
    if "target" not in raw:
        raise ConfigError("missing required table 'target'")
    table = raw["target"]
    if not isinstance(table, dict) or set(table) != {"components"}:
        raise ConfigError("'target' must be a table holding only a 'components' array")
    comps = table["components"]
    if not isinstance(comps, list) or not comps:
        raise ConfigError("'target.components' must be a non-empty array of tables")
    for i, comp in enumerate(comps):
        if not isinstance(comp, dict):
            raise ConfigError(f"target.components[{i}] must be a table")
        unknown = set(comp) - COMPONENT_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in target.components[{i}]")
        missing = COMPONENT_KEYS - set(comp)
        if missing:
            raise ConfigError(f"target.components[{i}] is missing {sorted(missing)}")
    try:
        return GaussianMixture.from_spec(comps)
    except (ContractViolation, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid 'target': {exc}") from None


def _build_schedule(raw, horizon, defaults_used):
    table = raw.get("schedule")
    if table is None:
        defaults_used.append("schedule")
        table = dict(SCHEDULE_DEFAULTS)
    if not isinstance(table, dict):
        raise ConfigError("'schedule' must be a table")
    kind = table.get("kind", "constant")
    if kind not in SCHEDULE_KEYS:
        raise ConfigError(f"invalid 'schedule.kind': must be one of {sorted(SCHEDULE_KEYS)}, got {kind!r}")
    unknown = set(table) - SCHEDULE_KEYS[kind]
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in 'schedule' for kind {kind!r}")
    try:
        if kind == "constant":
            if "beta" not in table:
                defaults_used.append("schedule.beta")
            return NoiseSchedule.constant(float(table.get("beta", 1.0)), horizon)
        if not {"beta_min", "beta_max"} <= set(table):
            raise ConfigError("linear schedule needs 'beta_min' and 'beta_max'")
        return NoiseSchedule.linear(float(table["beta_min"]), float(table["beta_max"]), horizon)
    except ConfigError:
        raise
    except (ContractViolation, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid 'schedule': {exc}") from None


def validate(raw):
    """Turn a raw mapping into an :class:`ExperimentConfig`."""
    unknown = set(raw) - set(DEFAULTS) - {"target", "schedule"}
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    defaults_used = []
    vals = {}
    for key, default in DEFAULTS.items():
        if key in raw:
            vals[key] = raw[key]
        else:
            vals[key] = copy.deepcopy(default)
            defaults_used.append(key)
    raw = {**raw, **vals}
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        vals["output_dir"] = env_dir
        if "output_dir" in defaults_used:
            defaults_used.remove("output_dir")

    sigma = _number(raw, "sigma")
    _require(sigma > 0, "sigma", "positive")
    horizon = _number(raw, "horizon")
    _require(horizon > 0, "horizon", "positive")
    n_steps = _number(raw, "n_steps", integer=True)
    _require(n_steps >= 10, "n_steps", "at least 10")
    n_particles = _number(raw, "n_particles", integer=True)
    _require(n_particles >= 1, "n_particles", "at least 1")
    cloud_size = _number(raw, "cloud_size", integer=True)
    _require(cloud_size >= 2, "cloud_size", "at least 2")
    ball_radius = _number(raw, "ball_radius")
    _require(ball_radius > 0, "ball_radius", "positive")
    seed = _number(raw, "seed", integer=True)
    _require(seed >= 0, "seed", "non-negative")
    grid_size = _number(raw, "grid_size", integer=True)
    _require(grid_size >= 2, "grid_size", "at least 2")
    cover_horizon = _number(raw, "cover_horizon")
    _require(cover_horizon > 0, "cover_horizon", "positive")
    _require(isinstance(vals["output_dir"], str) and vals["output_dir"], "output_dir", "a non-empty string")
    _require(vals["drift"] in DRIFTS, "drift", f"one of {DRIFTS}")
    _require(vals["init"] in INITS, "init", f"one of {INITS}")
    _require(isinstance(vals["record_paths"], bool), "record_paths", "a boolean")
    for key in ("epsilons", "horizons"):
        v = vals[key]
        _require(isinstance(v, list) and v and all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in v),
                 key, "a non-empty array of numbers")
    _require(all(0 < e <= 1 for e in vals["epsilons"]), "epsilons", "in (0, 1]")
    _require(all(h > 0 for h in vals["horizons"]), "horizons", "positive")
    opt = {}
    for key in ("L", "c", "clip_level"):
        opt[key] = None if vals[key] is None else _number(raw, key)
        if opt[key] is not None:
            _require(opt[key] > 0, key, "positive")
    if opt["c"] is not None:
        _require(opt["c"] <= 1, "c", "at most 1")

    target = _build_target(raw)
    schedule = _build_schedule(raw, horizon, defaults_used)
    return ExperimentConfig(
        target=target, schedule=schedule, sigma=sigma, horizon=horizon, n_steps=n_steps,
        n_particles=n_particles, cloud_size=cloud_size, ball_radius=ball_radius, seed=seed,
        output_dir=vals["output_dir"], drift=vals["drift"], init=vals["init"],
        epsilons=[float(e) for e in vals["epsilons"]], horizons=[float(h) for h in vals["horizons"]],
        grid_size=grid_size, record_paths=vals["record_paths"], cover_horizon=cover_horizon,
        L=opt["L"], c=opt["c"], clip_level=opt["clip_level"], defaults_used=defaults_used,
    )


def read_raw(path=None):
    """Parse a TOML file (the bundled default when ``path`` is None)."""
    try:
        if path is None:
            text = resources.files("ouscore").joinpath("default.toml").read_text(encoding="utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message carries "(at line L, column C)"
        raise ConfigError(f"cannot parse config {path or 'default'}: {exc}") from None


def load_config(path=None, overrides=None):
    """Read, override and validate an experiment config."""
    return validate(apply_overrides(read_raw(path), overrides))
