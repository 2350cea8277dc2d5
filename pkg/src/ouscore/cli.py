"""Command-line experiment runner.

    ouscore SUBCOMMAND [--config FILE] [--set key=value ...]

Subcommands: sample, score-error, verify, covering, kl, mixing. Results
go to ``<output_dir>/<subcommand>/`` together with ``manifest.json``.
Exit status is 0 on success, 1 when a check fails or a computation
raises, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
import traceback
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from . import _rng, analysis, divergence
from .config import ConfigError, load_config
from .errors import OuscoreError
from .schedule import NoiseSchedule
from .sde import OracleScoreDrift, ReferenceDrift, SemigroupDrift, simulate_reverse
from .semigroup import SemigroupEstimator, sample_cloud, score_from_semigroup
from .targets import RadonNikodym, log_density, oracle_score

SUBCOMMANDS = ("sample", "score-error", "verify", "covering", "kl", "mixing")
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo(cfg):
    # data files leave out where they were written so reruns elsewhere match
    out = cfg.to_dict()
    out.pop("output_dir")
    return out


def _schedule_for(cfg, horizon):
    s = cfg.schedule
    if s.kind == "constant":
        return NoiseSchedule.constant(s.beta, horizon)
    return NoiseSchedule.linear(s.beta_min, s.beta_max, horizon)


def _rnd(cfg):
    return RadonNikodym(cfg.target, cfg.sigma, L=cfg.L, c=cfg.c, ball_radius=cfg.ball_radius)


def _estimator(cfg):
    cloud = sample_cloud(cfg.dim, cfg.cloud_size, cfg.seed)
    return SemigroupEstimator(cloud, _rnd(cfg), cfg.clip_level)


def _drift(cfg, schedule, kind=None):
    kind = kind or cfg.drift
    if kind == "oracle_score":
        return OracleScoreDrift(cfg.target, schedule, cfg.sigma)
    if kind == "reference":
        return ReferenceDrift(schedule, cfg.sigma)
    return SemigroupDrift(_estimator(cfg), schedule)


def _moments(samples):
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False)) if n > 1 else np.zeros((samples.shape[1],) * 2)
    se = np.sqrt(np.diag(cov) / n)
    return {"mean": mean, "covariance": cov, "std_error_mean": se}


def cmd_sample(cfg, out):
    res = simulate_reverse(cfg.schedule, cfg.sigma, _drift(cfg, cfg.schedule), cfg.init, cfg.n_steps,
                           cfg.n_particles, cfg.seed, target=cfg.target, record_paths=cfg.record_paths)
    d = cfg.dim
    write_csv(os.path.join(out, "samples.csv"), [f"x_{i}" for i in range(d)], res.samples)
    files = ["samples.csv"]
    if res.paths is not None:
        rows = (
            [k, res.paths.times[k], p, *res.paths.states[k, p]]
            for k in range(len(res.paths.times))
            for p in range(cfg.n_particles)
        )
        write_csv(os.path.join(out, "paths.csv"), ["step", "time", "particle"] + [f"x_{i}" for i in range(d)], rows)
        files.append("paths.csv")
    summary = {"n_particles": cfg.n_particles, "seed": cfg.seed, **_moments(res.samples), "config": _echo(cfg)}
    write_json(os.path.join(out, "summary.json"), summary)
    return EXIT_OK, files + ["summary.json"]


def cmd_score_error(cfg, out):
    est = _estimator(cfg)
    x, t = analysis.verification_grid(cfg.dim, cfg.ball_radius, cfg.grid_size, cfg.grid_size, cfg.horizon)
    got = score_from_semigroup(est, cfg.schedule, cfg.sigma, x, t)
    want = np.stack([oracle_score(cfg.target, cfg.schedule, cfg.sigma, float(t[i, 0]), x[i]) for i in range(t.shape[0])])
    err = np.linalg.norm(got - want, axis=-1)
    d = cfg.dim
    header = ["t"] + [f"x_{i}" for i in range(d)] + [f"est_score_{i}" for i in range(d)]
    header += [f"oracle_score_{i}" for i in range(d)] + ["abs_err"]
    rows = (
        [t[i, j], *x[i, j], *got[i, j], *want[i, j], err[i, j]]
        for i in range(t.shape[0])
        for j in range(t.shape[1])
    )
    write_csv(os.path.join(out, "score_error.csv"), header, rows)
    summary = {
        "max_abs_err": float(err.max()),
        "mean_abs_err": float(err.mean()),
        "cloud_size": cfg.cloud_size,
        "cloud_attempts": est.cloud.attempts,
        "clip_level": est.clip_level,
        "L": est.rnd.L,
        "c": est.rnd.c,
        "config": _echo(cfg),
    }
    write_json(os.path.join(out, "summary.json"), summary)
    return EXIT_OK, ["score_error.csv", "summary.json"]


def _entry(name, statement, trials, violations, residual, passed):
    return {"name": name, "statement": statement, "trials": trials, "violations": violations,
            "max_residual": residual, "pass": bool(passed)}


def cmd_verify(cfg, out):
    rnd = _rnd(cfg)
    est = _estimator(cfg)
    d, R, T = cfg.dim, cfg.ball_radius, cfg.cover_horizon
    entries = []
    v = analysis.verify_metric_axioms(d, R, T, 100_000, cfg.seed)
    entries.append(_entry("metric_axioms", "rho_OU is a metric on [0,T] x B^d(R)", 100_000, v, None, v == 0))
    env = analysis.verify_envelope(rnd, R, 1_000_000, cfg.seed, T)
    entries.append(_entry("envelope", "|g(e^-t x + sqrt(1-e^-2t) z) - g(0)| <= L((R v 1) + sqrt(2)|z|)",
                          1_000_000, env.violations, env.max_ratio, env.violations == 0))
    l2 = analysis.verify_l2_lipschitz(rnd, 200, 10_000, cfg.seed, T)
    entries.append(_entry("l2_lipschitz", "||g_{t,x} - g_{t',x'}||_L2 <= L(1 + sigma sqrt(2d)) rho_OU",
                          200, l2.violations, l2.max_ratio, l2.violations == 0))
    res = analysis.verify_commutation(est, 50, cfg.seed, 1e-5, T)
    entries.append(_entry("commutation", "gradient commutes with the empirical OU semigroup",
                          50, int(res >= 1e-6), res, res < 1e-6))
    x, t = analysis.verification_grid(d, R, cfg.grid_size, cfg.grid_size, T)
    reg = analysis.verify_drift_regularity(est, x, t)
    entries.append(_entry("drift_regularity", "|grad log U_t f| <= L/c, Lip <= L/c + L^2/c^2, |clipped| <= 2L/c",
                          x.shape[0] * x.shape[1], int(not reg.holds),
                          max(reg.max_norm / reg.norm_bound, reg.max_quotient / reg.quotient_bound), reg.holds))
    ok = all(e["pass"] for e in entries)
    write_json(os.path.join(out, "verify.json"), {"pass": ok, "lemmas": entries, "config": _echo(cfg)})
    return (EXIT_OK if ok else EXIT_FAIL), ["verify.json"]


def cmd_covering(cfg, out):
    reports = analysis.verify_covering_product(cfg.dim, cfg.ball_radius, cfg.cover_horizon, cfg.epsilons)
    header = ["epsilon", "cover_size", "product_bound", "holds", "interval_factor", "ball_factor", "resolution", "refined"]
    write_csv(os.path.join(out, "covering.csv"), header,
              ([r.epsilon, r.cover_size, r.product_bound, r.holds, r.interval_factor, r.ball_factor, r.resolution,
                r.refined] for r in reports))
    ok = all(r.holds for r in reports)
    return (EXIT_OK if ok else EXIT_FAIL), ["covering.csv"]


def cmd_kl(cfg, out):
    oracle = _drift(cfg, cfg.schedule, "oracle_score")
    drift = _drift(cfg, cfg.schedule)
    est, se = divergence.girsanov_path_kl(cfg.schedule, cfg.sigma, oracle, drift, cfg.init, cfg.n_particles,
                                          cfg.n_steps, cfg.seed, target=cfg.target)
    obj, obj_se = divergence.reverse_kl_objective(cfg.schedule, cfg.sigma, drift.log_phi_grad, cfg.target,
                                                  cfg.n_particles, cfg.n_steps, cfg.seed)
    report = {
        "estimate": est,
        "std_error": se,
        "n_paths": cfg.n_particles,
        "drift_a": "oracle_score",
        "drift_b": cfg.drift,
        "reverse_kl_objective": {"estimate": obj, "std_error": obj_se},
        "config": _echo(cfg),
    }
    write_json(os.path.join(out, "kl.json"), report)
    return EXIT_OK, ["kl.json"]


def _kl_to_reference(cfg):
    """KL(pi || N(0, sigma^2 I)); Monte Carlo for proper mixtures."""
    target, d = cfg.target, cfg.dim
    ref_cov = cfg.sigma**2 * np.eye(d)
    if target.n_components == 1:
        return divergence.gaussian_kl(target.means[0], target.covs[0], np.zeros(d), ref_cov), 0.0
    y = target.sample(_rng.generator(cfg.seed, "kl0"), 100_000)
    log_ref = -0.5 * np.sum(y * y, axis=1) / cfg.sigma**2 - 0.5 * d * math.log(2 * math.pi * cfg.sigma**2)
    diff = log_density(target, y) - log_ref
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))


def cmd_mixing(cfg, out):
    kl0, kl0_se = _kl_to_reference(cfg)
    rows = []
    for T in cfg.horizons:
        schedule = _schedule_for(cfg, T)
        n_steps = max(10, int(round(cfg.n_steps * T / cfg.horizon)))
        drift = _drift(cfg, schedule)
        res = simulate_reverse(schedule, cfg.sigma, drift, "reference_gaussian", n_steps, cfg.n_particles,
                               cfg.seed, target=cfg.target)
        measured = divergence.empirical_marginal_kl(res.samples, cfg.target)
        if cfg.drift == "oracle_score":
            drift_term, drift_se = 0.0, 0.0
        else:
            oracle = _drift(cfg, schedule, "oracle_score")
            drift_term, drift_se = divergence.girsanov_path_kl(schedule, cfg.sigma, oracle, drift,
                                                               "reference_gaussian", cfg.n_particles, n_steps,
                                                               cfg.seed, target=cfg.target)
            drift_term = max(drift_term, 0.0)
        budget = divergence.mixing_bound(T, kl0, drift_term / T)
        rows.append((T, measured, budget.total, measured / budget.total, budget.mixing_term, budget.drift_term,
                     drift_se, n_steps))
    measured = [r[1] for r in rows]
    monotone = all(b < a for a, b in zip(measured, measured[1:]))
    within = all(r[1] <= 3.0 * r[2] for r in rows)
    write_csv(os.path.join(out, "mixing.csv"),
              ["T", "measured_kl", "bound", "ratio", "mixing_term", "drift_term", "drift_std_error", "n_steps"], rows)
    report = {
        "kl0": kl0,
        "kl0_std_error": kl0_se,
        "monotone": monotone,
        "within_3x_bound": within,
        "note": "measured_kl is a moment-matched Gaussian proxy; the 3x slack absorbs discretisation bias",
        "n_paths": cfg.n_particles,
        "config": _echo(cfg),
    }
    write_json(os.path.join(out, "mixing.json"), report)
    return (EXIT_OK if monotone and within else EXIT_FAIL), ["mixing.csv", "mixing.json"]


COMMANDS = {
    "sample": cmd_sample,
    "score-error": cmd_score_error,
    "verify": cmd_verify,
    "covering": cmd_covering,
    "kl": cmd_kl,
    "mixing": cmd_mixing,
}


def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("artifact", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _origin(exc):
    """``module.function`` of the innermost package frame that raised."""
    where = None
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("ouscore.") and mod != __name__:
            where = f"{mod.split('.', 1)[1]}.{frame.f_code.co_name}"
    return where or "cli"


def run(subcommand, config, overrides=None):
    """Run one subcommand on a config path (None for the default); return the exit status."""
    if subcommand not in COMMANDS:
        print(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = os.path.join(cfg.output_dir, subcommand)
    os.makedirs(out, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    error = None
    try:
        status, files = COMMANDS[subcommand](cfg, out)
    except OuscoreError as exc:
        status, files = EXIT_FAIL, []
        error = f"{_origin(exc)}: {type(exc).__name__}: {exc}"
        print(f"{subcommand} failed in {error}", file=sys.stderr)
    manifest = {
        "subcommand": subcommand,
        "config_path": None if config is None else os.path.abspath(config),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "files": files,
        "exit_status": status,
        "error": error,
        "wall_clock": {"started_at": started, "seconds": time.perf_counter() - t0},
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    return status


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="TOML experiment file (bundled default when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry; repeatable, dotted keys reach into tables")
    parser = argparse.ArgumentParser(prog="ouscore", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    helps = {
        "sample": "simulate the reverse SDE and write terminal particles",
        "score-error": "compare the semigroup score with the closed-form score on a grid",
        "verify": "run the regularity-property suite",
        "covering": "check the covering-number product inequality",
        "kl": "Girsanov path KL and reverse-KL objective of the configured drift",
        "mixing": "terminal KL against the mixing bound for several horizons",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
