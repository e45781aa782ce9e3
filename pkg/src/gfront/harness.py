"""Batch experiment runner.

Configs are flat INI files with four sections: [experiment] picks the kind
and run bookkeeping, [field] the velocity law, [grid] the solver steps, and
[params] the kind-specific knobs.  Per-trial seeds are derived from the
master seed by a fixed 64-bit mix, trials are independent jobs, and all
aggregation happens single-threaded after the last trial, so output is a
pure function of (config, master seed) regardless of worker count.

Each run writes two files into the output directory: <name>.csv with one
record per (trial, measurement), then <name>.json with the aggregate
summary; both are written atomically and the summary only after the CSV it
references is complete.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import re
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .fields import FieldSpec, build_field
from .homog import (
    ContinuityReport,
    _fluct_plan,
    _fluct_stats,
    _fluct_trial,
    _grid_H,
    _homog_trial,
    _paired_boot_se,
    _rate_plan,
    _rate_trial,
    _shape_plan,
    _shape_trial,
    estimate_theta_bar,
    linear_u0,
    shape_set,
    sphere_directions,
    u_bar,
)
from .perc import (
    check_unicoherence,
    cl_of,
    detour_skeleton,
    random_connected_set,
    random_lattice,
)
from .stats import derive_seeds, loglog_fit, tail_fit
from .subadd import GapReport, SubadditiveOracle, gap_from_skeleton, prefix_deviation, rearrange

_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_SECTIONS = ("experiment", "field", "grid", "params")


class ConfigError(ValueError):
    """Invalid configuration; issues holds (field, reason) pairs."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(f"{f}: {r}" for f, r in self.issues))


@dataclass(frozen=True)
class ValidationIssue:
    field: str
    reason: str


@dataclass
class ValidationReport:
    ok: bool
    issues: list[ValidationIssue]
    config: "ExperimentConfig | None" = None
    normalized: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully resolved run: every default applied, every value typed."""

    kind: str
    name: str
    seed: int
    trials: int
    workers: int
    budget: float          # wall-clock seconds; 0 disables the cap
    out: str               # output directory from the config; "" = unset
    field: FieldSpec
    h: float
    dt: float | None       # None = derived per run as 0.9 h / (speed + 2)
    rho: float | None      # None = no guaranteed-dilation clock
    params: dict

    def param(self, name: str):
        return self.params[name]


@dataclass(frozen=True)
class TrialRecord:
    """One trial's persisted output plus its wall time."""

    trial: int
    seed: int
    rows: tuple
    elapsed: float


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[TrialRecord]
    summary: dict
    csv_path: Path
    summary_path: Path
    partial: bool


# ---------------------------------------------------------------------------
# value parsing and canonical formatting

def _fmt_scalar(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_typed(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if kind == "floats":
        return tuple(float(p) for p in raw.split(",") if p.strip())
    raise ValueError(f"unknown parameter type {kind!r}")


def _format_typed(kind: str, value) -> str:
    if kind == "int":
        return str(int(value))
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(int(v)) for v in value)
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    raise ValueError(f"unknown parameter type {kind!r}")


def _parse_optional(raw: str, none_tokens=("auto", "none", "")) -> float | None:
    raw = raw.strip()
    if raw.lower() in none_tokens:
        return None
    return float(raw)


# ---------------------------------------------------------------------------
# experiment kinds: per-trial bodies, setup, aggregation

@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str
    default: object        # None = derived at build time by the kind's resolve
    help: str


@dataclass(frozen=True)
class KindSpec:
    description: str
    params: tuple
    default_trials: int
    trial: Callable
    setup: Callable | None = None
    aggregate: Callable | None = None
    resolve: Callable | None = None    # fill derived parameter defaults
    check: Callable | None = None      # kind-specific validation issues


def _rows_matrix(records, prefix: str) -> np.ndarray:
    """Stack rows whose parameter starts with prefix, one line per trial."""
    return np.array([[v for p, v in rec.rows if p.startswith(prefix)]
                     for rec in records], dtype=np.float64)


# -- field-check ------------------------------------------------------------

def _trial_field_check(config, payload, idx, seed):
    pr = config.params
    spec = config.field
    field = build_field(spec.with_seed(seed))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-pr["extent"], pr["extent"], size=(pr["n_samples"], spec.d))
    vel = field.eval_many(pts)
    speed = np.sqrt((vel ** 2).sum(axis=1))
    jac = field.jacobian_many(pts)
    div_exact = float(np.abs(np.trace(jac, axis1=1, axis2=2)).max())
    div_fd = float(np.abs(field.divergence_fd(pts)).max())
    violations = int((speed > spec.amplitude + pr["tol"]).sum())
    return [("max_speed", float(speed.max())),
            ("speed_violations", violations),
            ("max_div_exact", div_exact),
            ("max_div_fd", div_fd)]


def _agg_field_check(config, payload, records):
    speeds = _rows_matrix(records, "max_speed")
    viol = _rows_matrix(records, "speed_violations")
    dex = _rows_matrix(records, "max_div_exact")
    dfd = _rows_matrix(records, "max_div_fd")
    ok = (viol.sum() == 0 and dex.max() <= 1e-10
          and dfd.max() <= config.params["div_tol"])
    return {"max_speed": float(speeds.max()),
            "speed_violations": int(viol.sum()),
            "max_div_exact": float(dex.max()),
            "max_div_fd": float(dfd.max()),
            "ok": bool(ok)}


# -- percolation-tail ---------------------------------------------------------

def _block_sites(set_size: int, d: int) -> np.ndarray:
    """First set_size sites of a centered cube, row-major, so S is connected."""
    side = math.ceil(set_size ** (1.0 / d))
    sites = np.array(list(np.ndindex(*(side,) * d))[:set_size], dtype=np.int64)
    return sites - side // 2


def _setup_perc_tail(config):
    return {"sites": _block_sites(config.params["set_size"], config.field.d)}


def _trial_perc_tail(config, payload, idx, seed):
    pr = config.params
    lat = random_lattice(pr["radius"], pr["p"], seed, d=config.field.d)
    mask = cl_of(lat, payload["sites"])
    return [("cl_size", int(mask.sum()))]


def _agg_perc_tail(config, payload, records):
    values = _rows_matrix(records, "cl_size").ravel()
    out = {"set_size": config.params["set_size"],
           "mean_cl_size": float(values.mean()),
           "max_cl_size": int(values.max())}
    try:
        fit = tail_fit(values, base=float(config.params["set_size"]))
        out.update(tail_slope=fit.slope, tail_intercept=fit.intercept,
                   tail_r2=fit.r2, tail_points=len(fit.deltas))
    except ValueError as e:
        out["tail_fit_error"] = str(e)
    return out


def _check_perc_tail(config):
    issues = []
    pr = config.params
    if not 0.0 < pr["p"] < 1.0:
        issues.append(ValidationIssue("params.p", "p must lie in (0, 1)"))
    if pr["radius"] < 2:
        issues.append(ValidationIssue("params.radius", "radius must be >= 2"))
    if pr["set_size"] < 1:
        issues.append(ValidationIssue("params.set_size", "set_size must be >= 1"))
    else:
        side = math.ceil(pr["set_size"] ** (1.0 / config.field.d))
        if side > 2 * pr["radius"] + 1:
            issues.append(ValidationIssue(
                "params.set_size", "seed block does not fit inside the lattice"))
    return issues


# -- unicoherence -------------------------------------------------------------

def _trial_unicoherence(config, payload, idx, seed):
    pr = config.params
    shape = pr["shape"]
    rng = np.random.default_rng(seed)
    size = int(1 + rng.integers(pr["max_size"]))
    mask = random_connected_set(shape, size, int(rng.integers(2 ** 62)))
    rep = check_unicoherence(shape, mask)
    return [("ok", 1 if rep.ok else 0),
            ("n_components", rep.n_components),
            ("size", size)]


def _agg_unicoherence(config, payload, records):
    oks = _rows_matrix(records, "ok").ravel()
    return {"pass_fraction": float(oks.mean()), "failures": int((oks == 0).sum())}


def _check_unicoherence_cfg(config):
    issues = []
    shape = config.params["shape"]
    if len(shape) < 2 or any(s < 2 for s in shape):
        issues.append(ValidationIssue("params.shape",
                                      "window shape needs >= 2 sites per axis"))
    elif not 1 <= config.params["max_size"] <= int(np.prod(shape)):
        issues.append(ValidationIssue(
            "params.max_size", f"must lie in [1, {int(np.prod(shape))}] for this window"))
    return issues


# -- detour -------------------------------------------------------------------

def _trial_detour(config, payload, idx, seed):
    pr = config.params
    d = config.field.d
    lat = random_lattice(pr["radius"], pr["p"], seed, d=d)
    labels = lat.open_labels()
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    if counts.max(initial=0) < 2:
        # no cluster offers two endpoints; trivially compliant
        return [("ok", 1), ("n_segments", 0), ("max_step", 0.0), ("n_detours", 0)]
    coords = np.argwhere(labels == int(np.argmax(counts))) + lat.origin
    rng = np.random.default_rng(seed)
    a, b = coords[rng.choice(len(coords), size=2, replace=False)]
    sk = detour_skeleton(lat, a.astype(np.float64), b.astype(np.float64))
    revisit_free = len(set(sk.component_ids)) == len(sk.component_ids)
    ok = (sk.max_step() <= math.sqrt(d) + 1e-9 and revisit_free
          and sk.within_counting_bound())
    return [("ok", 1 if ok else 0),
            ("n_segments", sk.n_segments),
            ("max_step", float(sk.max_step())),
            ("n_detours", len(sk.component_ids))]


def _agg_detour(config, payload, records):
    oks = _rows_matrix(records, "ok").ravel()
    steps = _rows_matrix(records, "max_step").ravel()
    return {"pass_fraction": float(oks.mean()),
            "failures": int((oks == 0).sum()),
            "worst_step": float(steps.max())}


def _check_detour(config):
    issues = []
    if not 0.0 < config.params["p"] < 1.0:
        issues.append(ValidationIssue("params.p", "p must lie in (0, 1)"))
    if config.params["radius"] < 2:
        issues.append(ValidationIssue("params.radius", "radius must be >= 2"))
    return issues


# -- rearrange ------------------------------------------------------------------

def _trial_rearrange(config, payload, idx, seed):
    pr = config.params
    rng = np.random.default_rng(seed)
    d = int(rng.choice(pr["dims"]))
    n = int(1 + rng.integers(pr["n_max"]))
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    vs = u * (rng.random(n) ** (1.0 / d))[:, None]
    perm = rearrange(vs)
    dev = prefix_deviation(vs, vs.mean(axis=0), perm)
    return [("ok", 1 if dev <= 2 * d + 1e-9 else 0),
            ("d", d), ("n", n), ("deviation", float(dev))]


def _agg_rearrange(config, payload, records):
    oks = _rows_matrix(records, "ok").ravel()
    devs = _rows_matrix(records, "deviation").ravel()
    return {"pass_fraction": float(oks.mean()),
            "failures": int((oks == 0).sum()),
            "worst_deviation": float(devs.max())}


def _check_rearrange(config):
    issues = []
    pr = config.params
    if pr["n_max"] < 1:
        issues.append(ValidationIssue("params.n_max", "n_max must be >= 1"))
    if len(pr["dims"]) == 0 or any(d < 1 for d in pr["dims"]):
        issues.append(ValidationIssue("params.dims", "dims must be positive integers"))
    return issues


# -- shape ----------------------------------------------------------------------

def _setup_shape(config):
    pr = config.params
    est = estimate_theta_bar(config.field, radii=pr["est_radii"],
                             trials=pr["est_trials"], h=config.h, dt=config.dt,
                             rho=config.rho, seed=config.seed + 0x5EED)
    cfg, t_cap = _shape_plan(config.field, pr["ts"], config.h, config.dt)
    return {"star": shape_set(est, 1.0), "cfg": cfg, "t_cap": t_cap,
            "theta_bar": est.theta_bar.tolist()}


def _trial_shape(config, payload, idx, seed):
    pr = config.params
    vals = _shape_trial(config.field, seed, payload["cfg"], pr["ts"],
                        payload["star"], config.rho, payload["t_cap"],
                        pr["refine"])
    return [(f"hausdorff[t={t:g}]", float(v)) for t, v in zip(pr["ts"], vals)]


def _agg_shape(config, payload, records):
    vals = _rows_matrix(records, "hausdorff[")
    medians = np.median(vals, axis=0)
    return {"ts": list(config.params["ts"]),
            "medians": medians.tolist(),
            "strictly_decreasing": bool(np.all(np.diff(medians) < 0))}


def _check_shape(config):
    issues = []
    pr = config.params
    if _not_increasing(pr["ts"]) or pr["ts"][0] <= 0:
        issues.append(ValidationIssue("params.ts", "ts must be positive and strictly increasing"))
    if _not_increasing(pr["est_radii"]):
        issues.append(ValidationIssue("params.est_radii", "radii must be strictly increasing"))
    if pr["est_trials"] < 2:
        issues.append(ValidationIssue("params.est_trials", "need at least 2 trials"))
    if pr["refine"] < 1:
        issues.append(ValidationIssue("params.refine", "refine must be >= 1"))
    return issues


# -- fluctuation ------------------------------------------------------------------

def _setup_fluct(config):
    pr = config.params
    v, cfg, targets, t_cap, radii_eff = _fluct_plan(
        config.field, pr["direction"], pr["radii"], config.h, config.dt,
        pr["width_factor"], pr["margin"])
    return {"v": v, "cfg": cfg, "targets": targets, "t_cap": t_cap,
            "radii_eff": radii_eff}


def _trial_fluct(config, payload, idx, seed):
    th = _fluct_trial(config.field, seed, payload["cfg"], payload["targets"],
                      config.rho, payload["t_cap"])
    return [(f"theta[R={r:g}]", float(t))
            for r, t in zip(config.params["radii"], th)]


def _agg_fluct(config, payload, records):
    radii = tuple(float(r) for r in config.params["radii"])
    th = _rows_matrix(records, "theta[")
    rep = _fluct_stats(th, payload["v"], radii, payload["radii_eff"], len(records))
    return {"radii": list(radii),
            "means": rep.means.tolist(),
            "stds": rep.stds.tolist(),
            "ses": rep.ses.tolist(),
            "std_exponent": rep.std_exponent,
            "std_r2": rep.std_fit.r2 if rep.std_fit else None,
            "bias_exponent": rep.bias_exponent,
            "theta_bar_hat": rep.theta_bar_hat}


def _check_fluct(config):
    issues = []
    pr = config.params
    if len(pr["direction"]) != config.field.d or not any(pr["direction"]):
        issues.append(ValidationIssue(
            "params.direction", f"need a nonzero vector of length {config.field.d}"))
    if _not_increasing(pr["radii"]) or pr["radii"][0] <= 0:
        issues.append(ValidationIssue("params.radii",
                                      "radii must be positive and strictly increasing"))
    if config.trials < 2:
        issues.append(ValidationIssue("experiment.trials", "need at least 2 trials"))
    if pr["width_factor"] <= 0:
        issues.append(ValidationIssue("params.width_factor", "must be positive"))
    if pr["margin"] < 0:
        issues.append(ValidationIssue("params.margin", "must be nonnegative"))
    return issues


# -- homog-error --------------------------------------------------------------------

def _resolve_homog(params, config):
    if params["t_samples"] is None:
        params["t_samples"] = tuple(float(k) for k in range(1, int(params["T"]) + 1))
    return params


def _setup_homog(config):
    pr = config.params
    est = estimate_theta_bar(config.field, radii=pr["est_radii"],
                             trials=pr["est_trials"], h=config.h, dt=config.dt,
                             rho=config.rho, seed=config.seed + 0x5EED)
    u0 = linear_u0(np.asarray(pr["p"]))
    x_samples = (tuple(0.0 for _ in range(config.field.d)),)
    ubar = {(t, x): u_bar(est, u0, t, np.asarray(x))
            for t in pr["t_samples"] for x in x_samples}
    return {"ubar": ubar, "x_samples": x_samples}


def _trial_homog(config, payload, idx, seed):
    pr = config.params
    u0 = linear_u0(np.asarray(pr["p"]))
    x_samples = tuple(np.asarray(x) for x in payload["x_samples"])
    row, fails = _homog_trial(config.field, seed, pr["eps"], u0,
                              pr["t_samples"], x_samples, payload["ubar"],
                              config.h, config.dt, config.rho)
    rows = [(f"sup_err[eps={e:g}]", float(v)) for e, v in zip(pr["eps"], row)]
    rows.append(("solver_failures", len(fails)))
    return rows


def _agg_homog(config, payload, records):
    errors = _rows_matrix(records, "sup_err[")
    fails = _rows_matrix(records, "solver_failures").ravel()
    medians = np.nanmedian(errors, axis=0)
    out = {"eps": list(config.params["eps"]),
           "medians": medians.tolist(),
           "solver_failures": int(fails.sum()),
           "exponent": None, "fit_r2": None}
    if np.all(np.isfinite(medians)) and np.all(medians > 0):
        fit = loglog_fit(config.params["eps"], medians)
        out.update(exponent=fit.exponent, fit_r2=fit.r2)
    return out


def _check_homog(config):
    issues = []
    pr = config.params
    eps = pr["eps"]
    if len(eps) == 0 or eps[-1] <= 0 or any(b >= a for a, b in zip(eps, eps[1:])):
        issues.append(ValidationIssue("params.eps",
                                      "eps must be positive and strictly decreasing"))
    if len(pr["p"]) != config.field.d:
        issues.append(ValidationIssue("params.p",
                                      f"need a vector of length {config.field.d}"))
    if pr["T"] <= 0:
        issues.append(ValidationIssue("params.T", "T must be positive"))
    elif any(t <= 0 or t > pr["T"] + 1e-9 for t in pr["t_samples"]):
        issues.append(ValidationIssue("params.t_samples", "times must lie in (0, T]"))
    if _not_increasing(pr["est_radii"]):
        issues.append(ValidationIssue("params.est_radii", "radii must be strictly increasing"))
    if pr["est_trials"] < 2:
        issues.append(ValidationIssue("params.est_trials", "need at least 2 trials"))
    return issues


# -- continuity ----------------------------------------------------------------------

def _resolve_continuity(params, config):
    if params["amplitudes"] is None:
        a = config.field.amplitude
        params["amplitudes"] = tuple(a * (1.0 + 2.0 ** -n) for n in range(4))
    return params


def _setup_continuity(config):
    d = config.field.d
    return {"dirs": sphere_directions(d, config.params["n_dirs"]),
            "p_grid": sphere_directions(d, config.params["p_dirs"])}


def _trial_continuity(config, payload, idx, seed):
    pr = config.params
    radii = pr["radii"]
    dirs = payload["dirs"]
    rows = []
    laws = (config.field.amplitude,) + tuple(pr["amplitudes"])
    for ai, a in enumerate(laws):
        spec = dataclasses.replace(config.field, amplitude=float(a))
        dt, win_r, t_cap = _rate_plan(radii, config.h, config.dt, spec.speed_bound)
        th, reff = _rate_trial(spec, seed, dirs, radii, win_r, config.h, dt,
                               config.rho, t_cap, jitter=False)
        rates = th[-1] / reff[-1]
        rows.extend((f"rate[a{ai},v{k}]", float(rates[k]))
                    for k in range(len(dirs)))
    return rows


def _agg_continuity(config, payload, records):
    pr = config.params
    dirs, p_grid = payload["dirs"], payload["p_grid"]
    laws = (config.field.amplitude,) + tuple(pr["amplitudes"])
    mats = [_rows_matrix(records, f"rate[a{ai},") for ai in range(len(laws))]

    def masked_mean(mat):
        ok = np.isfinite(mat)
        return np.where(ok, mat, 0.0).sum(axis=0) / np.maximum(ok.sum(axis=0), 1)

    ref_H = _grid_H(masked_mean(mats[0]), dirs, p_grid)
    rng = np.random.default_rng(config.seed + 1)
    diffs, ses = [], []
    for mat in mats[1:]:
        diffs.append(float(np.max(np.abs(_grid_H(masked_mean(mat), dirs, p_grid)
                                         - ref_H))))
        ses.append(_paired_boot_se(mat, mats[0], dirs, p_grid, pr["n_boot"], rng))
    rep = ContinuityReport(amplitudes=tuple(laws[1:]), ref_amplitude=laws[0],
                           p_grid=p_grid, diffs=np.asarray(diffs),
                           ses=np.asarray(ses))
    return {"amplitudes": list(rep.amplitudes),
            "ref_amplitude": rep.ref_amplitude,
            "diffs": rep.diffs.tolist(),
            "ses": rep.ses.tolist(),
            "decreasing_beyond_se": bool(rep.decreasing_beyond_se())}


def _check_continuity(config):
    issues = []
    pr = config.params
    if len(pr["amplitudes"]) == 0 or any(a < 0 for a in pr["amplitudes"]):
        issues.append(ValidationIssue("params.amplitudes",
                                      "need a nonempty list of amplitudes >= 0"))
    if _not_increasing(pr["radii"]) or pr["radii"][0] <= 0:
        issues.append(ValidationIssue("params.radii",
                                      "radii must be positive and strictly increasing"))
    if pr["n_boot"] < 8:
        issues.append(ValidationIssue("params.n_boot", "need at least 8 resamples"))
    if pr["n_dirs"] < 2 or pr["p_dirs"] < 2:
        issues.append(ValidationIssue("params.n_dirs", "need at least 2 directions"))
    if config.trials < 2:
        issues.append(ValidationIssue("experiment.trials", "need at least 2 trials"))
    return issues


# -- skeleton-gap ----------------------------------------------------------------------

def _norm_plus_sqrt(v) -> float:
    r = float(np.linalg.norm(v))
    return r + math.sqrt(r)


def _euclid(v) -> float:
    return float(np.linalg.norm(v))


def _unit_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x)


def _phi_one(r) -> float:
    return 1.0


def _chain_skeleton(x) -> np.ndarray:
    """Monotone lattice chain from 0 to x with increments in {-1,0,1}^d."""
    x = np.asarray(x, dtype=np.float64)
    m = int(np.ceil(np.abs(x).max()))
    ks = np.arange(m + 1)[:, None]
    return np.rint(ks * x / m)


def _trial_skeleton_gap(config, payload, idx, seed):
    pr = config.params
    oracle = SubadditiveOracle(f=_norm_plus_sqrt, fbar=_euclid,
                               support_grad=_unit_grad)
    rep: GapReport = gap_from_skeleton(
        oracle, nu=pr["nu"], phi=_phi_one, doubling=pr["doubling"],
        skeleton_provider=_chain_skeleton, d=config.field.d,
        levels=pr["levels"], base_radius=pr["base_radius"],
        samples=pr["samples"], seed=seed,
        good_C=pr["good_c"], good_K=pr["good_k"])
    rows = [(f"sup_norm[level={lv.level}]", lv.sup_normalized)
            for lv in rep.levels]
    rows.append(("certificates_ok",
                 1 if all(lv.certificates_ok for lv in rep.levels) else 0))
    return rows


def _agg_skeleton_gap(config, payload, records):
    sups = _rows_matrix(records, "sup_norm[")
    certs = _rows_matrix(records, "certificates_ok").ravel()
    return {"constant": float(sups.max()),
            "per_level_sup": sups.max(axis=0).tolist(),
            "certificates_ok": bool(np.all(certs == 1))}


def _check_skeleton_gap(config):
    issues = []
    pr = config.params
    if not 0.0 < pr["nu"] <= 1.0:
        issues.append(ValidationIssue("params.nu", "nu must lie in (0, 1]"))
    if pr["doubling"] <= 1.0:
        issues.append(ValidationIssue("params.doubling", "doubling must exceed 1"))
    for key in ("levels", "samples"):
        if pr[key] < 1:
            issues.append(ValidationIssue(f"params.{key}", "must be >= 1"))
    if pr["base_radius"] <= 0:
        issues.append(ValidationIssue("params.base_radius", "must be positive"))
    if pr["good_c"] <= 0 or pr["good_k"] <= 0:
        issues.append(ValidationIssue("params.good_c", "good set constants must be positive"))
    return issues


def _not_increasing(seq) -> bool:
    return len(seq) == 0 or any(b <= a for a, b in zip(seq, seq[1:]))


_KINDS: dict[str, KindSpec] = {
    "field-check": KindSpec(
        "Divergence and speed-bound checks at random sample points, one field per trial.",
        (ParamSpec("extent", "float", 8.0, "half-width of the sampling box"),
         ParamSpec("n_samples", "int", 200, "sample points per trial"),
         ParamSpec("tol", "float", 1e-9, "slack over the exact speed bound"),
         ParamSpec("div_tol", "float", 1e-4, "pass bound on the finite-difference divergence")),
        default_trials=50,
        trial=_trial_field_check, aggregate=_agg_field_check),
    "percolation-tail": KindSpec(
        "Distribution of |cl(S)| for a fixed seed block over i.i.d. site lattices.",
        (ParamSpec("p", "float", 0.95, "open-site probability"),
         ParamSpec("radius", "int", 20, "lattice half-width"),
         ParamSpec("set_size", "int", 40, "sites in the seed block S")),
        default_trials=1000,
        trial=_trial_perc_tail, setup=_setup_perc_tail,
        aggregate=_agg_perc_tail, check=_check_perc_tail),
    "unicoherence": KindSpec(
        "Boundary connectivity of complement components of random connected sets.",
        (ParamSpec("shape", "ints", (8, 8), "window shape"),
         ParamSpec("max_size", "int", 48, "largest set size drawn per trial")),
        default_trials=1000,
        trial=_trial_unicoherence, aggregate=_agg_unicoherence,
        check=_check_unicoherence_cfg),
    "detour": KindSpec(
        "Skeletons between random endpoints of the largest open cluster.",
        (ParamSpec("p", "float", 0.95, "open-site probability"),
         ParamSpec("radius", "int", 20, "lattice half-width")),
        default_trials=200,
        trial=_trial_detour, aggregate=_agg_detour, check=_check_detour),
    "rearrange": KindSpec(
        "Prefix-bounded orderings of random unit-ball vectors.",
        (ParamSpec("n_max", "int", 12, "largest instance size"),
         ParamSpec("dims", "ints", (2, 3), "dimensions drawn per trial")),
        default_trials=1000,
        trial=_trial_rearrange, aggregate=_agg_rearrange, check=_check_rearrange),
    "shape": KindSpec(
        "Hausdorff distance between scaled reachable sets and the limit shape.",
        (ParamSpec("ts", "floats", (25.0, 50.0, 100.0), "times to compare at"),
         ParamSpec("est_radii", "floats", (16.0, 32.0, 64.0), "radii for the rate estimate"),
         ParamSpec("est_trials", "int", 30, "trials for the rate estimate"),
         ParamSpec("refine", "int", 8, "boundary sampling refinement")),
        default_trials=10,
        trial=_trial_shape, setup=_setup_shape, aggregate=_agg_shape,
        check=_check_shape),
    "fluctuation": KindSpec(
        "Std and bias of arrival times along a ray, with fitted exponents.",
        (ParamSpec("direction", "floats", (1.0, 0.0), "ray direction"),
         ParamSpec("radii", "floats", (16.0, 32.0, 64.0, 128.0), "radii along the ray"),
         ParamSpec("width_factor", "float", 0.5, "transversal window width per unit radius"),
         ParamSpec("margin", "float", 12.0, "extra window padding")),
        default_trials=30,
        trial=_trial_fluct, setup=_setup_fluct, aggregate=_agg_fluct,
        check=_check_fluct),
    "homog-error": KindSpec(
        "Sup error between the scaled solver and the homogenized solution per eps.",
        (ParamSpec("p", "floats", (1.0, 0.0), "slope of the linear initial condition"),
         ParamSpec("T", "float", 4.0, "time horizon"),
         ParamSpec("eps", "floats", (1 / 16, 1 / 32, 1 / 64), "scales, strictly decreasing"),
         ParamSpec("t_samples", "floats", None, "evaluation times; default 1..T"),
         ParamSpec("est_radii", "floats", (16.0, 32.0, 64.0), "radii for the rate estimate"),
         ParamSpec("est_trials", "int", 30, "trials for the rate estimate")),
        default_trials=10,
        trial=_trial_homog, setup=_setup_homog, aggregate=_agg_homog,
        resolve=_resolve_homog, check=_check_homog),
    "continuity": KindSpec(
        "sup_p gap of the effective Hamiltonian between nearby laws, paired seeds.",
        (ParamSpec("amplitudes", "floats", None,
                   "comparison amplitudes; default a(1 + 2^-n), n = 0..3"),
         ParamSpec("radii", "floats", (16.0, 32.0, 64.0), "radii for the rate estimates"),
         ParamSpec("n_dirs", "int", 16, "direction count for the rates (2d)"),
         ParamSpec("p_dirs", "int", 16, "p grid size for the sup"),
         ParamSpec("n_boot", "int", 200, "paired bootstrap resamples")),
        default_trials=20,
        trial=_trial_continuity, setup=_setup_continuity,
        aggregate=_agg_continuity, resolve=_resolve_continuity,
        check=_check_continuity),
    "skeleton-gap": KindSpec(
        "Normalized subadditivity gap of a synthetic oracle under radius doubling.",
        (ParamSpec("nu", "float", 0.5, "gap growth exponent"),
         ParamSpec("doubling", "float", 2.0, "radius ratio between levels"),
         ParamSpec("levels", "int", 5, "doubling levels"),
         ParamSpec("base_radius", "float", 4.0, "first level radius"),
         ParamSpec("samples", "int", 24, "lattice samples per level"),
         ParamSpec("good_c", "float", 2.0, "good-increment additivity constant"),
         ParamSpec("good_k", "float", 2.0, "good-increment length factor")),
        default_trials=4,
        trial=_trial_skeleton_gap, aggregate=_agg_skeleton_gap,
        check=_check_skeleton_gap),
}


def list_experiments() -> dict:
    """Catalog of kinds with parameter schemas and defaults."""
    out = {}
    for kind, ks in _KINDS.items():
        out[kind] = {
            "description": ks.description,
            "default_trials": ks.default_trials,
            "params": {p.name: {"type": p.type,
                                "default": (None if p.default is None
                                            else _format_typed(p.type, p.default)),
                                "help": p.help}
                       for p in ks.params},
        }
    return out


# ---------------------------------------------------------------------------
# config parsing, normalization, validation

def parse_config(text: str) -> ValidationReport:
    """Parse and validate a config; never raises on bad input."""
    issues: list[ValidationIssue] = []
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        return ValidationReport(False, [ValidationIssue("config", str(e))])

    for section in cp.sections():
        if section not in _SECTIONS:
            issues.append(ValidationIssue(section, "unknown section"))

    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    if not exp.get("kind"):
        issues.append(ValidationIssue("experiment.kind", "missing experiment kind"))
        return ValidationReport(False, issues)
    kind = exp.pop("kind").strip()
    if kind not in _KINDS:
        issues.append(ValidationIssue(
            "experiment.kind",
            f"unknown kind {kind!r}; choices: {', '.join(_KINDS)}"))
        return ValidationReport(False, issues)
    ks = _KINDS[kind]

    def take(block: dict, where: str, key: str, typ: str, default):
        raw = block.pop(key, None)
        if raw is None:
            return default
        try:
            return _parse_typed(typ, raw)
        except ValueError as e:
            issues.append(ValidationIssue(f"{where}.{key}", str(e)))
            return default

    name = exp.pop("name", kind).strip()
    if not _NAME_RE.match(name):
        issues.append(ValidationIssue(
            "experiment.name", "use only letters, digits, dot, dash, underscore"))
    seed = take(exp, "experiment", "seed", "int", 0)
    trials = take(exp, "experiment", "trials", "int", ks.default_trials)
    workers = take(exp, "experiment", "workers", "int", 1)
    budget = take(exp, "experiment", "budget", "float", 0.0)
    out = exp.pop("out", "").strip()
    for key in exp:
        issues.append(ValidationIssue(f"experiment.{key}", "unknown key"))
    if seed < 0:
        issues.append(ValidationIssue("experiment.seed", "seed must be >= 0"))
    if trials < 1:
        issues.append(ValidationIssue("experiment.trials", "trials must be >= 1"))
    if workers < 1:
        issues.append(ValidationIssue("experiment.workers", "workers must be >= 1"))
    if budget < 0:
        issues.append(ValidationIssue("experiment.budget", "budget must be >= 0"))

    fld = dict(cp["field"]) if cp.has_section("field") else {}
    d = take(fld, "field", "d", "int", 2)
    amplitude = take(fld, "field", "amplitude", "float", 1.0)
    bump_radius = take(fld, "field", "bump_radius", "float", 0.35)
    lattice_pitch = take(fld, "field", "lattice_pitch", "float", 0.15)
    for key in fld:
        issues.append(ValidationIssue(f"field.{key}", "unknown key"))
    field = None
    try:
        # per-trial seeds replace this one; the law itself carries no seed here
        field = FieldSpec(d=d, amplitude=amplitude, bump_radius=bump_radius,
                          lattice_pitch=lattice_pitch, seed=0)
    except ValueError as e:
        issues.append(ValidationIssue("field", str(e)))

    grid = dict(cp["grid"]) if cp.has_section("grid") else {}
    h = take(grid, "grid", "h", "float", 0.25)
    dt_raw = grid.pop("dt", "auto")
    rho_raw = grid.pop("rho", "none")
    for key in grid:
        issues.append(ValidationIssue(f"grid.{key}", "unknown key"))
    dt = rho = None
    try:
        dt = _parse_optional(dt_raw)
    except ValueError:
        issues.append(ValidationIssue("grid.dt", f"not a number or 'auto': {dt_raw!r}"))
    try:
        rho = _parse_optional(rho_raw)
    except ValueError:
        issues.append(ValidationIssue("grid.rho", f"not a number or 'none': {rho_raw!r}"))
    if not h > 0:
        issues.append(ValidationIssue("grid.h", "h must be positive"))
    if dt is not None and not dt > 0:
        issues.append(ValidationIssue("grid.dt", "dt must be positive"))
    if rho is not None and not rho > 0:
        issues.append(ValidationIssue("grid.rho", "rho must be positive"))

    raw_params = dict(cp["params"]) if cp.has_section("params") else {}
    params: dict = {}
    for p in ks.params:
        raw = raw_params.pop(p.name, None)
        if raw is None:
            params[p.name] = p.default
        else:
            try:
                params[p.name] = _parse_typed(p.type, raw)
            except ValueError as e:
                issues.append(ValidationIssue(f"params.{p.name}", str(e)))
                params[p.name] = p.default
    for key in raw_params:
        issues.append(ValidationIssue(
            f"params.{key}", f"unknown parameter for kind {kind!r}"))

    if issues or field is None:
        return ValidationReport(False, issues)

    config = ExperimentConfig(kind=kind, name=name, seed=seed, trials=trials,
                              workers=workers, budget=budget, out=out,
                              field=field, h=h, dt=dt, rho=rho, params=params)
    if ks.resolve is not None:
        ks.resolve(params, config)

    # CFL bound: dt (speed + 2) <= h; continuity runs its laws at raised speeds
    if dt is not None:
        top = amplitude
        if kind == "continuity":
            top = max((amplitude, *params["amplitudes"]))
        limit = h / (top + 2.0)
        if dt > limit + 1e-12:
            issues.append(ValidationIssue(
                "grid.dt",
                f"CFL bound violated: dt (speed + 2) / h = {dt * (top + 2.0) / h:.4g} > 1; "
                f"require dt <= {limit!r}"))
    if ks.check is not None:
        issues.extend(ks.check(config))
    if issues:
        return ValidationReport(False, issues)
    return ValidationReport(True, [], config=config,
                            normalized=normalize_config(config))


def read_config(path) -> ExperimentConfig:
    """Load a config file or raise ConfigError naming every problem."""
    report = parse_config(Path(path).read_text())
    if not report.ok:
        raise ConfigError([(i.field, i.reason) for i in report.issues])
    return report.config


def normalize_config(config: ExperimentConfig) -> str:
    """Canonical text form with every default applied; parsing it back is a
    fixed point, and its hash identifies the run."""
    ks = _KINDS[config.kind]
    lines = [
        "[experiment]",
        f"kind = {config.kind}",
        f"name = {config.name}",
        f"seed = {config.seed}",
        f"trials = {config.trials}",
        f"workers = {config.workers}",
        f"budget = {repr(float(config.budget))}",
        f"out = {config.out}",
        "",
        "[field]",
        f"d = {config.field.d}",
        f"amplitude = {repr(config.field.amplitude)}",
        f"bump_radius = {repr(config.field.bump_radius)}",
        f"lattice_pitch = {repr(config.field.lattice_pitch)}",
        "",
        "[grid]",
        f"h = {repr(config.h)}",
        f"dt = {'auto' if config.dt is None else repr(config.dt)}",
        f"rho = {'none' if config.rho is None else repr(config.rho)}",
        "",
        "[params]",
    ]
    lines.extend(f"{p.name} = {_format_typed(p.type, config.params[p.name])}"
                 for p in ks.params)
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(normalize_config(config).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# running

def _run_one(config: ExperimentConfig, payload: dict, idx: int, seed: int):
    t0 = time.perf_counter()
    rows = _KINDS[config.kind].trial(config, payload, idx, seed)
    return TrialRecord(trial=idx, seed=seed, rows=tuple(rows),
                       elapsed=time.perf_counter() - t0)


def _render_csv(name: str, records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["experiment", "trial", "seed", "parameter", "value"])
    for rec in records:
        for param, value in rec.rows:
            writer.writerow([name, rec.trial, rec.seed, param, _fmt_scalar(value)])
    return buf.getvalue()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_experiment(config: ExperimentConfig, out_dir=None) -> RunResult:
    """Run every trial, then write <name>.csv and <name>.json atomically.

    out_dir beats config.out beats ./runs.  A wall-clock budget > 0 stops
    dispatching once exceeded; whatever finished is written and the summary
    is flagged partial with the completed count, never silently truncated.
    """
    report = parse_config(normalize_config(config))
    if not report.ok:
        raise ConfigError([(i.field, i.reason) for i in report.issues])

    out = Path(out_dir or config.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    ks = _KINDS[config.kind]
    start = time.monotonic()
    seeds = derive_seeds(config.seed, config.trials)
    payload = ks.setup(config) if ks.setup is not None else {}

    def over_budget():
        return config.budget > 0 and time.monotonic() - start > config.budget

    # the budget can only cut the run short after at least one trial landed,
    # so a too-small budget still yields a usable (flagged) record
    done: dict[int, TrialRecord] = {}
    partial = False
    if config.workers == 1:
        for i in range(config.trials):
            if done and over_budget():
                partial = True
                break
            done[i] = _run_one(config, payload, i, seeds[i])
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(_run_one, config, payload, i, seeds[i]): i
                       for i in range(config.trials)}
            pending = set(futures)
            while pending:
                timeout = None
                if config.budget > 0 and done:
                    timeout = max(0.0, config.budget - (time.monotonic() - start))
                finished, pending = wait(pending, timeout=timeout,
                                         return_when=FIRST_COMPLETED)
                for fut in finished:
                    rec = fut.result()
                    done[rec.trial] = rec
                if pending and over_budget():
                    partial = True
                    for fut in pending:
                        if not fut.cancel():
                            # already running; its result still counts
                            rec = fut.result()
                            done[rec.trial] = rec
                    break

    records = [done[i] for i in sorted(done)]
    csv_text = _render_csv(config.name, records)
    csv_bytes = csv_text.encode("utf-8")
    csv_path = out / f"{config.name}.csv"
    _atomic_write(csv_path, csv_bytes)

    stats = ks.aggregate(config, payload, records) if ks.aggregate else {}
    elapsed = time.monotonic() - start
    resolved_dt = config.dt
    if resolved_dt is None and config.kind != "continuity":
        resolved_dt = 0.9 * config.h / (config.field.speed_bound + 2.0)
    summary = {
        "name": config.name,
        "kind": config.kind,
        "config_hash": config_hash(config),
        "master_seed": config.seed,
        "trials_requested": config.trials,
        "trials_completed": len(records),
        "partial": partial,
        "workers": config.workers,
        "budget_seconds": config.budget,
        "elapsed_seconds": round(elapsed, 3),
        "csv": csv_path.name,
        "csv_sha256": hashlib.sha256(csv_bytes).hexdigest(),
        "solver": {
            "h": config.h,
            "dt": resolved_dt,
            "dt_policy": "explicit" if config.dt is not None else "auto",
            "rho": config.rho,
            "cfl": (None if resolved_dt is None else
                    resolved_dt * (config.field.speed_bound + 2.0) / config.h),
        },
        "stats": stats,
        "config": normalize_config(config),
    }
    summary_path = out / f"{config.name}.json"
    _atomic_write(summary_path,
                  (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return RunResult(config=config, records=records, summary=summary,
                     csv_path=csv_path, summary_path=summary_path, partial=partial)
