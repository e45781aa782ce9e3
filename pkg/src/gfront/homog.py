"""Large-scale behavior of the front and its convergence experiments.

The passage time from the origin grows linearly along rays; its rate defines
a norm-like function whose unit ball S_1 is the limiting front shape, and the
effective Hamiltonian is the support-function transform of S_1.  This module
estimates the rate on a direction grid, builds the shape set and Hamiltonian
from it, evaluates the sup-representation formulas for the homogenized and
oscillatory solutions, and packages the Monte Carlo experiments that measure
fluctuations, bias, shape convergence, homogenization error, and continuity
in the law.

Estimates are plug-in: the rate in direction v is mean theta(0, Rv)/R at the
largest radius run, which overestimates by subadditivity; the Fekete
diagnostic reports how cleanly the per-radius rates decrease.  Experiments
derive per-trial seeds from one master seed, so results are reproducible and
trials can be compared across laws with common random numbers.
"""

from __future__ import annotations

import dataclasses
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .fields import Field, FieldSpec, build_field
from .reach import Box, GridConfig, first_passage
from .stats import PowerFit, derive_seeds, fekete_violation, loglog_fit
from .subadd import GoodSet, SubadditiveOracle

_EPS = 1e-9


# ---------------------------------------------------------------------------
# direction grids

def _icosphere(level: int) -> np.ndarray:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) for v in verts]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            verts.append(0.5 * (verts[i] + verts[j]))
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(level):
        nxt = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    arr = np.asarray(verts)
    arr /= np.linalg.norm(arr, axis=1, keepdims=True)
    return np.unique(np.round(arr, 12), axis=0)


def sphere_directions(d: int, n: int = 64, level: int = 2) -> np.ndarray:
    """Unit direction grid: n equal angles in 2d, icosahedral refinement in 3d."""
    if d == 2:
        ang = 2.0 * math.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if d == 3:
        return _icosphere(level)
    raise ValueError(f"d must be 2 or 3, got {d}")


def _unit_rows(vs: np.ndarray) -> np.ndarray:
    vs = np.atleast_2d(np.asarray(vs, dtype=np.float64))
    return vs / np.linalg.norm(vs, axis=1, keepdims=True)


def _half_aligned(pad: float, h: float) -> float:
    """Smallest (k + 1/2) h at least pad; a window centered on the source
    with this radius puts the source exactly on a cell center."""
    return (math.ceil(pad / h - 0.5 - 1e-12) + 0.5) * h


class _DirectionInterp:
    """Value per grid direction, queried at arbitrary unit vectors.

    2d: periodic linear interpolation in angle.  3d: nearest grid direction
    (the icosahedral grid is fine enough that this is a sub-degree error).
    """

    def __init__(self, directions: np.ndarray, values: np.ndarray):
        self.directions = np.asarray(directions, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        self.d = self.directions.shape[1]
        if self.d == 2:
            ang = np.arctan2(self.directions[:, 1], self.directions[:, 0])
            order = np.argsort(ang)
            self._ang = ang[order]
            self._val = self.values[order]

    def at_units(self, units: np.ndarray) -> np.ndarray:
        units = np.atleast_2d(units)
        if self.d == 2:
            phi = np.arctan2(units[:, 1], units[:, 0])
            xp = np.concatenate([self._ang, [self._ang[0] + 2 * math.pi]])
            fp = np.concatenate([self._val, [self._val[0]]])
            shifted = np.where(phi < self._ang[0], phi + 2 * math.pi, phi)
            return np.interp(shifted, xp, fp)
        out = np.empty(len(units))
        for s in range(0, len(units), 65536):
            blk = units[s:s + 65536]
            out[s:s + 65536] = self.values[np.argmax(blk @ self.directions.T, axis=1)]
        return out


# ---------------------------------------------------------------------------
# shape estimate

@dataclass
class ShapeEstimate:
    """Per-direction passage rates with their radii and Monte Carlo errors.

    Rates are theta divided by the distance to the cell center actually
    read, not the nominal radius, so the radial part of the grid
    quantization cancels instead of polluting the estimate.
    """

    directions: np.ndarray
    radii: tuple
    means: np.ndarray        # (n_radii, n_dirs) mean theta(0, R v)
    stds: np.ndarray
    ses: np.ndarray
    rates_mean: np.ndarray   # (n_radii, n_dirs) mean theta / effective radius
    rates_se: np.ndarray
    trials: int
    unreachable: np.ndarray  # (n_radii, n_dirs) trials that missed the target
    spec: FieldSpec | None = None
    grid_h: float = 0.5
    grid_dt: float = 0.0
    rho: float | None = None
    samples: np.ndarray | None = None  # (trials, n_radii, n_dirs) rate samples

    def __post_init__(self):
        self._interp = None

    @property
    def theta_bar(self) -> np.ndarray:
        """Plug-in rate per direction from the largest radius (an overestimate)."""
        return self.rates_mean[-1]

    @property
    def theta_bar_se(self) -> np.ndarray:
        return self.rates_se[-1]

    def rates(self) -> np.ndarray:
        """Mean rate for every radius; rows should not increase (Fekete)."""
        return self.rates_mean

    def _unit_interp(self) -> _DirectionInterp:
        if self._interp is None:
            tb = self.theta_bar
            if not np.all(np.isfinite(tb)) or np.any(tb <= 0):
                bad = int(np.argmin(np.where(np.isfinite(tb), tb, -np.inf)))
                raise ValueError(
                    f"rate estimate in direction {bad} is not positive/finite; "
                    "increase the time cap or the trial count")
            self._interp = _DirectionInterp(self.directions, tb)
        return self._interp

    def theta_bar_at(self, v) -> float:
        """Homogeneous extension: |v| times the interpolated unit rate."""
        v = np.asarray(v, dtype=np.float64)
        r = float(np.linalg.norm(v))
        if r == 0.0:
            return 0.0
        return r * float(self._unit_interp().at_units((v / r)[None, :])[0])

    def fekete_worst(self) -> float:
        """Largest rise of the per-radius rates across directions, in SE units."""
        return max(fekete_violation(self.rates_mean[:, k], self.rates_se[:, k])
                   for k in range(self.rates_mean.shape[1]))

    def _antipodal_pairs(self) -> list[tuple[int, int]]:
        tree = cKDTree(self.directions)
        pairs = []
        for k, v in enumerate(self.directions):
            dist, j = tree.query(-v)
            if dist <= 1e-9 and k < j:
                pairs.append((k, int(j)))
        return pairs

    def reflection_worst(self) -> float:
        """Largest theta_bar asymmetry between v and -v, in SE units.

        A worst-of-K statistic: on a 64-direction grid values around 2-2.5
        are ordinary noise; see reflection_mean for the aggregate check.
        """
        tb, se = self.theta_bar, self.theta_bar_se
        worst = 0.0
        for k, j in self._antipodal_pairs():
            gap = abs(tb[k] - tb[j])
            denom = math.hypot(se[k], se[j])
            worst = max(worst, gap / denom if denom > 0 else (0.0 if gap == 0 else math.inf))
        return worst

    def reflection_mean(self) -> float:
        """Mean theta_bar asymmetry over antipodal pairs, in SE-of-mean units."""
        tb, se = self.theta_bar, self.theta_bar_se
        pairs = self._antipodal_pairs()
        if not pairs:
            return 0.0
        gaps = np.array([tb[k] - tb[j] for k, j in pairs])
        var = sum(se[k] ** 2 + se[j] ** 2 for k, j in pairs)
        denom = math.sqrt(var) / len(pairs)
        gap = abs(float(gaps.mean()))
        return gap / denom if denom > 0 else (0.0 if gap == 0 else math.inf)


def _column_stats(values: np.ndarray) -> tuple[np.ndarray, ...]:
    """Mean/std/se of a (trials, ...) array with infs masked out per entry."""
    finite = np.isfinite(values)
    counts = finite.sum(axis=0)
    safe = np.where(finite, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, safe.sum(axis=0) / counts, np.nan)
        dev2 = np.where(finite, (values - means[None]) ** 2, 0.0)
        stds = np.where(counts > 1,
                        np.sqrt(dev2.sum(axis=0) / np.maximum(counts - 1, 1)), 0.0)
        ses = np.where(counts > 0, stds / np.sqrt(np.maximum(counts, 1)), np.inf)
    return means, stds, ses, counts


def _rate_plan(radii, h: float, dt: float | None, speed_bound: float,
               window_factor: float = 1.3, t_cap_factor: float = 2.6):
    """Resolved time step, window radius, and time cap for rate runs."""
    r_max = float(radii[-1])
    if dt is None:
        dt = 0.9 * h / (speed_bound + 2.0)
    win_r = _half_aligned(r_max * window_factor + 3.0, h)
    return dt, win_r, t_cap_factor * r_max + 10 * dt


def _rate_trial(spec: FieldSpec, seed: int, dirs: np.ndarray,
                radii: Sequence[float], win_r: float, h: float, dt: float,
                rho: float | None, t_cap: float, jitter: bool,
                neighbor_range: int | None = None):
    """One realisation of the rate measurement: times and effective radii.

    Returns (n_radii, n_dirs) arrays of quantized arrival times and exact
    distances to the cell centers the readings came from.  Module level so
    batch runners can ship it to worker processes.
    """
    x0 = np.zeros(spec.d)
    if jitter:
        x0 = np.random.default_rng(int(seed)).uniform(0.0, h, spec.d)
    cfg = GridConfig(window=Box.centered(x0, win_r), h=h, dt=dt,
                     neighbor_range=neighbor_range)
    rel_targets = np.concatenate([r * dirs for r in radii], axis=0)
    targets = x0 + rel_targets
    field = build_field(spec.with_seed(int(seed)))
    pm = first_passage(field, x0, cfg, rho=rho, targets=targets, t_cap=t_cap)
    n_r, n_k = len(radii), len(dirs)
    th = np.array([pm.theta_at(y) for y in targets]).reshape(n_r, n_k)
    cen = np.array([cfg.center_of(cfg.index_of(y)) for y in targets])
    reff = np.linalg.norm(cen - x0, axis=1).reshape(n_r, n_k)
    return th, reff


def estimate_theta_bar(spec: FieldSpec, directions=None,
                       radii: Sequence[float] = (16.0, 32.0, 64.0),
                       trials: int = 30, *, h: float = 0.5,
                       dt: float | None = None, rho: float | None = None,
                       seed: int = 0, seeds: Sequence[int] | None = None,
                       window_factor: float = 1.3, t_cap_factor: float = 2.6,
                       jitter: bool = False, neighbor_range: int | None = None,
                       keep_samples: bool = False) -> ShapeEstimate:
    """Monte Carlo estimate of the passage rate on a direction grid.

    One solve per trial reads every (radius, direction) target, and each
    reading is divided by the exact distance to the cell center it came
    from.  With jitter on, the source gets a uniform subcell offset per
    trial (legitimate by stationarity), which turns the remaining angular
    quantization into zero-mean noise the standard errors account for;
    leave it off for deterministic fields, where exactness matters more
    than bias.  neighbor_range widens the hop stencil when the default's
    angular resolution would bias rates at off-lattice directions (the
    hop metric overshoots by about 1% near the worst angles at range 3).
    Unreachable targets are counted per target and excluded
    from the means; a direction unreachable in every trial at the largest
    radius is an error since no rate can be formed there.
    """
    radii = tuple(float(r) for r in radii)
    if len(radii) == 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly increasing")
    if trials < 2:
        raise ValueError("need at least 2 trials")
    if not window_factor >= 1.0:
        # targets outside the window would read a clamped edge cell silently
        raise ValueError("window_factor must be >= 1")
    if directions is None:
        directions = sphere_directions(spec.d)
    dirs = _unit_rows(directions)
    n_r, n_k = len(radii), len(dirs)
    rel_targets = np.concatenate([r * dirs for r in radii], axis=0)
    r_max = radii[-1]

    dt, win_r, t_cap = _rate_plan(radii, h, dt, spec.speed_bound,
                                  window_factor, t_cap_factor)
    if seeds is None:
        seeds = derive_seeds(seed, trials)
    elif len(seeds) < trials:
        raise ValueError("fewer seeds than trials")

    th = np.full((trials, n_r, n_k), np.inf)
    reff = np.empty((trials, n_r, n_k))
    for i in range(trials):
        th[i], reff[i] = _rate_trial(spec, int(seeds[i]), dirs, radii,
                                     win_r, h, dt, rho, t_cap, jitter,
                                     neighbor_range)

    means, stds, ses, counts = _column_stats(th)
    rate_samples = th / reff
    rates_mean, _, rates_se, _ = _column_stats(rate_samples)
    if np.any(counts[-1] == 0):
        bad = int(np.argmin(counts[-1]))
        raise RuntimeError(
            f"direction {bad} at radius {r_max} was unreachable in every trial; "
            "raise t_cap_factor or the window factor")
    return ShapeEstimate(directions=dirs, radii=radii, means=means, stds=stds,
                         ses=ses, rates_mean=rates_mean, rates_se=rates_se,
                         trials=trials, unreachable=trials - counts,
                         spec=spec, grid_h=h, grid_dt=dt, rho=rho,
                         samples=rate_samples if keep_samples else None)


# ---------------------------------------------------------------------------
# shape sets and the effective Hamiltonian

@dataclass
class StarSet:
    """Star-shaped region around the origin given by a radius per direction."""

    directions: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.directions = _unit_rows(self.directions)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self._interp = _DirectionInterp(self.directions, self.radii)

    @property
    def d(self) -> int:
        return self.directions.shape[1]

    def radius_at(self, units) -> np.ndarray:
        return self._interp.at_units(np.atleast_2d(units))

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        r = np.linalg.norm(pts, axis=1)
        out = np.ones(len(pts), dtype=bool)
        far = r > tol
        if far.any():
            units = pts[far] / r[far, None]
            out[far] = r[far] <= self.radius_at(units) + tol
        return out

    def boundary_points(self, refine: int = 4) -> np.ndarray:
        if self.d == 2 and refine > 1:
            n = len(self.directions) * refine
            ang = 2.0 * math.pi * np.arange(n) / n
            units = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            return units * self.radius_at(units)[:, None]
        return self.directions * self.radii[:, None]

    def scaled(self, alpha: float) -> "StarSet":
        return StarSet(self.directions, alpha * self.radii)


def shape_set(est: ShapeEstimate, t: float) -> StarSet:
    """The limiting front at time t: radius t / rate(v) per direction.

    Scaling is exact by construction: shape_set(est, a t) has radii a times
    shape_set(est, t).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    tb = est.theta_bar
    if not np.all(np.isfinite(tb)) or np.any(tb <= 0):
        raise ValueError("rate estimates must be positive and finite")
    return StarSet(est.directions, t / tb)


def effective_H(est: ShapeEstimate, p) -> float:
    """max over grid directions v of p . v / rate(v); homogeneous degree 1."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.max(est.directions @ p / est.theta_bar))


def effective_H_dual(est: ShapeEstimate, p, refine: int = 4) -> float:
    """Support function of the unit shape set, on a refined boundary."""
    p = np.asarray(p, dtype=np.float64)
    pts = shape_set(est, 1.0).boundary_points(refine)
    return float(np.max(pts @ p))


# ---------------------------------------------------------------------------
# representation formulas

def linear_u0(p) -> Callable:
    p = np.asarray(p, dtype=np.float64)

    def u0(pts):
        return np.asarray(pts, dtype=np.float64) @ p
    return u0


def cone_u0(center, slope: float = 1.0) -> Callable:
    center = np.asarray(center, dtype=np.float64)

    def u0(pts):
        pts = np.asarray(pts, dtype=np.float64)
        return -slope * np.linalg.norm(np.atleast_2d(pts) - center, axis=1)
    return u0


def _eval_u0(u0: Callable, pts: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(u0(pts), dtype=np.float64)
        if vals.shape == (len(pts),):
            return vals
    except Exception:
        pass
    return np.array([float(u0(q)) for q in pts])


def u_bar(est: ShapeEstimate, u0: Callable, t: float, x, *,
          refine: int = 4, n_radial: int = 12) -> float:
    """Homogenized solution: sup of u0 over x + S_t, sampled radially.

    The sample is the refined boundary scaled by k/n_radial for each k, plus
    the center, so interior maxima of non-monotone u0 are seen.  Error is at
    most Lip(u0) times the sample spacing.
    """
    x = np.asarray(x, dtype=np.float64)
    if t == 0:
        return float(_eval_u0(u0, x[None, :])[0])
    bnd = shape_set(est, t).boundary_points(refine)
    fracs = np.arange(1, n_radial + 1) / n_radial
    pts = (fracs[:, None, None] * bnd[None, :, :]).reshape(-1, len(x)) + x
    pts = np.vstack([pts, x[None, :]])
    return float(_eval_u0(u0, pts).max())


def u_eps_curve(field: Field, u0: Callable, ts: Sequence[float], x, eps: float,
                *, h: float = 0.5, dt: float | None = None,
                rho: float | None = None, window_pad: float = 4.0,
                max_cells: int = 50_000_000) -> list[float]:
    """Oscillatory solution at scale eps for several times from one solve.

    u^eps(t, x) = sup of u0 over eps * {theta(x/eps, .) <= t/eps}.  The
    window radius (speed+1) T + pad contains every path of duration T, so no
    reachable cell is clipped.
    """
    ts = [float(t) for t in ts]
    if any(t < 0 for t in ts):
        raise ValueError("times must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    src = x / eps
    T = max(ts) / eps
    if dt is None:
        dt = 0.9 * h / (field.v_max + 2.0)
    win_r = _half_aligned((field.v_max + 1.0) * T + window_pad, h)
    cfg = GridConfig(window=Box.centered(src, win_r), h=h, dt=dt,
                     max_cells=max_cells)
    pm = first_passage(field, src, cfg, rho=rho, t_cap=T + 2 * dt)
    theta = pm.theta.ravel()
    centers = cfg.centers()
    out = []
    for t in ts:
        sel = theta <= t / eps + _EPS
        if not sel.any():
            out.append(float(_eval_u0(u0, (x)[None, :])[0]))
            continue
        out.append(float(_eval_u0(u0, eps * centers[sel]).max()))
    return out


def u_eps(field: Field, u0: Callable, t: float, x, eps: float, **kw) -> float:
    return u_eps_curve(field, u0, [t], x, eps, **kw)[0]


# ---------------------------------------------------------------------------
# experiments

@dataclass
class HomogErrorReport:
    eps_list: tuple
    t_samples: tuple
    x_samples: tuple
    errors: np.ndarray          # (trials, n_eps), nan where a trial failed
    medians: np.ndarray
    exponent: float | None
    fit: PowerFit | None
    failures: list
    est: ShapeEstimate


def _homog_trial(spec: FieldSpec, seed: int, eps_list, u0: Callable,
                 t_samples, x_samples, ubar: dict, h: float,
                 dt: float | None, rho: float | None):
    """One field, every eps: sup error against the reference table.

    Returns (errors row, failures), failures as (eps, message) pairs; a
    failed eps leaves nan in the row instead of aborting the trial.
    """
    field = build_field(spec.with_seed(int(seed)))
    row = np.full(len(eps_list), np.nan)
    failures = []
    for j, eps in enumerate(eps_list):
        try:
            worst = 0.0
            for x in x_samples:
                vals = u_eps_curve(field, u0, t_samples, x, eps,
                                   h=h, dt=dt, rho=rho)
                for t, v in zip(t_samples, vals):
                    worst = max(worst, abs(v - ubar[(t, tuple(x))]))
            row[j] = worst
        except Exception as e:  # record and skip the trial at this eps
            failures.append((eps, f"{type(e).__name__}: {e}"))
    return row, failures


def homog_error_experiment(spec: FieldSpec, p=(1.0, 0.0), T: float = 4.0,
                           eps_list: Sequence[float] = (1 / 16, 1 / 32, 1 / 64),
                           trials: int = 30, *, u0: Callable | None = None,
                           t_samples: Sequence[float] | None = None,
                           x_samples: Sequence | None = None,
                           h: float = 0.5, dt: float | None = None,
                           rho: float | None = None, seed: int = 0,
                           est: ShapeEstimate | None = None,
                           est_trials: int | None = None,
                           est_radii: Sequence[float] = (16.0, 32.0, 64.0)
                           ) -> HomogErrorReport:
    """Sup-error between u^eps and the homogenized solution, per eps.

    The reference solution is built from a rate estimate on the same grid
    parameters (h, dt), so the direction-dependent discretization bias of the
    solver appears in both terms and cancels instead of flooring the error.
    The (t, x) sup is taken over a deterministic sample lattice; its density
    is a parameter, defaulting to integer times at the origin.
    """
    eps_list = tuple(float(e) for e in eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if u0 is None:
        u0 = linear_u0(p)
    if t_samples is None:
        t_samples = tuple(float(k) for k in range(1, int(T) + 1))
    else:
        t_samples = tuple(float(t) for t in t_samples)
    if any(t > T + _EPS for t in t_samples):
        raise ValueError("t samples must lie in [0, T]")
    x_samples = ((np.zeros(spec.d),) if x_samples is None
                 else tuple(np.asarray(x, dtype=np.float64) for x in x_samples))
    if est is None:
        est = estimate_theta_bar(spec, radii=est_radii,
                                 trials=est_trials or max(trials, 10),
                                 h=h, dt=dt, rho=rho, seed=seed + 0x5EED)
    ubar = {(t, tuple(x)): u_bar(est, u0, t, x)
            for t in t_samples for x in x_samples}

    seeds = derive_seeds(seed, trials)
    errors = np.full((trials, len(eps_list)), np.nan)
    failures = []
    for i in range(trials):
        errors[i], fails = _homog_trial(spec, seeds[i], eps_list, u0,
                                        t_samples, x_samples, ubar, h, dt, rho)
        failures.extend((i, eps, msg) for eps, msg in fails)
    medians = np.nanmedian(errors, axis=0)
    fit = None
    exponent = None
    if np.all(np.isfinite(medians)) and np.all(medians > 0):
        fit = loglog_fit(eps_list, medians)
        exponent = fit.exponent
    return HomogErrorReport(eps_list=eps_list, t_samples=t_samples,
                            x_samples=tuple(tuple(x) for x in x_samples),
                            errors=errors, medians=medians, exponent=exponent,
                            fit=fit, failures=failures, est=est)


@dataclass
class FluctuationReport:
    direction: np.ndarray
    radii: tuple
    means: np.ndarray
    stds: np.ndarray
    ses: np.ndarray
    trials: int
    unreachable: np.ndarray
    std_fit: PowerFit | None
    diff_fit: PowerFit | None     # consecutive rate differences vs R
    bias_exponent: float | None   # slope of the diff fit plus one
    theta_bar_hat: float | None   # extrapolated limit rate
    bias_values: np.ndarray | None  # |mean - R theta_hat| per radius

    @property
    def std_exponent(self) -> float | None:
        return self.std_fit.exponent if self.std_fit else None


def _fluct_plan(spec: FieldSpec, direction, radii, h: float, dt: float | None,
                width_factor: float, margin: float):
    """Strip window and target layout for one fluctuation run.

    The window hugs the ray with transversal padding and is offset by half
    a cell so the source and axis-aligned targets land exactly on cell
    centers.  Returns (v, cfg, targets, t_cap, radii_eff).
    """
    radii = tuple(float(r) for r in radii)
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    d = len(v)
    r_max = radii[-1]
    targets = np.array([r * v for r in radii])

    ends = np.vstack([np.zeros(d), r_max * v])
    pad = np.array([_half_aligned(margin + width_factor * r_max
                                  * math.sqrt(max(0.0, 1.0 - v[ax] ** 2)), h)
                    for ax in range(d)])
    window = Box(lo=tuple(ends.min(axis=0) - pad), hi=tuple(ends.max(axis=0) + pad))
    if dt is None:
        dt = 0.9 * h / (spec.speed_bound + 2.0)
    cfg = GridConfig(window=window, h=h, dt=dt)
    t_cap = 2.2 * r_max + 10 * dt
    radii_eff = np.array([np.linalg.norm(cfg.center_of(cfg.index_of(y)))
                          for y in targets])
    return v, cfg, targets, t_cap, radii_eff


def _fluct_trial(spec: FieldSpec, seed: int, cfg: GridConfig,
                 targets: np.ndarray, rho: float | None,
                 t_cap: float) -> np.ndarray:
    """One strip solve: raw (unquantized) arrival time at every radius."""
    field = build_field(spec.with_seed(int(seed)))
    pm = first_passage(field, np.zeros(targets.shape[1]), cfg, rho=rho,
                       targets=targets, t_cap=t_cap)
    return np.array([pm.raw_at(y) for y in targets])


def _fluct_stats(th: np.ndarray, v: np.ndarray, radii: tuple,
                 radii_eff: np.ndarray, trials: int) -> FluctuationReport:
    """Fits over a (trials, n_radii) matrix of raw arrival times."""
    means, stds, ses, counts = _column_stats(th)
    if np.any(counts < 2):
        bad = int(np.argmin(counts))
        raise RuntimeError(f"radius {radii[bad]} reached in {counts[bad]} trials; "
                           "widen the window or raise the time cap")

    std_fit = loglog_fit(radii, stds) if np.all(stds > 1e-12) else None

    # consecutive differences of rates, per trial (common random numbers)
    diff_fit = None
    bias_exp = None
    theta_hat = None
    bias_values = None
    r_max = radii[-1]
    rates = th / radii_eff
    finite = np.isfinite(th)
    pair_ok = finite[:, :-1] & finite[:, 1:]
    diffs = np.where(pair_ok, rates[:, :-1] - rates[:, 1:], np.nan)
    dmeans = np.nanmean(diffs, axis=0)
    pos = dmeans > 0
    if pos.sum() >= 2:
        diff_fit = loglog_fit(np.asarray(radii[:-1])[pos], dmeans[pos])
        s = diff_fit.exponent
        bias_exp = s + 1.0
        ratio = radii[-1] / radii[-2]
        q = ratio**s
        if q < 1.0:
            # rate(R) - limit = sum of the fitted differences down the tail
            tail = diff_fit.amplitude * r_max**s / (1.0 - q)
            theta_hat = float(means[-1] / radii_eff[-1] - tail)
            bias_values = np.abs(means - radii_eff * theta_hat)
    return FluctuationReport(direction=v, radii=radii, means=means, stds=stds,
                             ses=ses, trials=trials,
                             unreachable=trials - counts, std_fit=std_fit,
                             diff_fit=diff_fit, bias_exponent=bias_exp,
                             theta_bar_hat=theta_hat, bias_values=bias_values)


def fluctuation_experiment(spec: FieldSpec, direction=(1.0, 0.0),
                           radii: Sequence[float] = (16.0, 32.0, 64.0, 128.0),
                           trials: int = 100, *, h: float = 0.25,
                           dt: float | None = None, rho: float | None = None,
                           seed: int = 0, width_factor: float = 0.5,
                           margin: float = 12.0) -> FluctuationReport:
    """Std and bias of theta(0, Rv) against R, with fitted exponents.

    One solve per trial reads every radius along the ray, so radii share
    common random numbers.  The window is offset by half a cell so the
    source and axis-aligned targets land exactly on cell centers, and the
    raw (unquantized) arrival times are used; together these keep grid
    artifacts out of the std and bias statistics.  The bias exponent comes
    from consecutive differences of the per-radius rates, whose correlated
    noise mostly cancels, and the limit rate is extrapolated from the
    fitted power law instead of plugging in the largest radius (which
    would force the last bias to zero).
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    radii = tuple(float(r) for r in radii)
    v, cfg, targets, t_cap, radii_eff = _fluct_plan(spec, direction, radii, h,
                                                    dt, width_factor, margin)
    seeds = derive_seeds(seed, trials)
    th = np.full((trials, len(radii)), np.inf)
    for i in range(trials):
        th[i] = _fluct_trial(spec, seeds[i], cfg, targets, rho, t_cap)
    return _fluct_stats(th, v, radii, radii_eff, trials)


@dataclass
class ContinuityReport:
    amplitudes: tuple
    ref_amplitude: float
    p_grid: np.ndarray
    diffs: np.ndarray
    ses: np.ndarray

    def decreasing_beyond_se(self) -> bool:
        for a, b, sa, sb in zip(self.diffs, self.diffs[1:], self.ses, self.ses[1:]):
            if not b < a - math.hypot(sa, sb):
                return False
        return True


def _grid_H(theta_bar, dirs: np.ndarray, p_grid: np.ndarray) -> np.ndarray:
    """H on a p grid from per-direction rates: max over v of p.v / rate(v)."""
    return np.max(dirs @ p_grid.T / np.asarray(theta_bar)[:, None], axis=0)


def _paired_boot_se(sa: np.ndarray, sr: np.ndarray, dirs: np.ndarray,
                    p_grid: np.ndarray, n_boot: int, rng) -> float:
    """Bootstrap SE of sup_p |H_a - H_ref| resampling trials jointly."""
    trials = len(sa)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, trials, size=trials)
        boots[b] = np.max(np.abs(_grid_H(sa[idx].mean(axis=0), dirs, p_grid)
                                 - _grid_H(sr[idx].mean(axis=0), dirs, p_grid)))
    return float(boots.std(ddof=1))


def continuity_experiment(base_spec: FieldSpec, amplitudes: Sequence[float],
                          trials: int = 50, *, p_grid=None,
                          radii: Sequence[float] = (16.0, 32.0, 64.0),
                          directions=None, h: float = 0.5,
                          dt: float | None = None, rho: float | None = None,
                          seed: int = 0, n_boot: int = 200
                          ) -> ContinuityReport:
    """sup_p |H^n(p) - H(p)| for laws differing in amplitude, paired seeds.

    Every law runs the same per-trial seeds, so identical laws give exactly
    zero difference and nearby laws give tightly correlated estimates; the
    standard errors come from a paired bootstrap over trials.
    """
    if p_grid is None:
        p_grid = sphere_directions(base_spec.d, 16)
    p_grid = _unit_rows(p_grid)
    shared = derive_seeds(seed, trials)

    def run(spec):
        return estimate_theta_bar(spec, directions=directions, radii=radii,
                                  trials=trials, h=h, dt=dt, rho=rho,
                                  seeds=shared, keep_samples=True)

    ref = run(base_spec)
    ref_H = _grid_H(ref.theta_bar, ref.directions, p_grid)
    diffs = []
    ses = []
    rng = np.random.default_rng(seed + 1)
    for a in amplitudes:
        est = run(dataclasses.replace(base_spec, amplitude=float(a)))
        diff = float(np.max(np.abs(_grid_H(est.theta_bar, est.directions, p_grid)
                                   - ref_H)))
        diffs.append(diff)
        ses.append(_paired_boot_se(est.samples[:, -1, :], ref.samples[:, -1, :],
                                   est.directions, p_grid, n_boot, rng))
    return ContinuityReport(amplitudes=tuple(float(a) for a in amplitudes),
                            ref_amplitude=base_spec.amplitude,
                            p_grid=p_grid, diffs=np.asarray(diffs),
                            ses=np.asarray(ses))


# ---------------------------------------------------------------------------
# shape convergence

@dataclass
class ShapeConvergenceReport:
    ts: tuple
    values: np.ndarray   # (trials, n_t) Hausdorff distances
    medians: np.ndarray

    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.medians) < 0))


def _mask_boundary_centers(mask: np.ndarray, centers: np.ndarray) -> np.ndarray:
    core = ndimage.binary_erosion(mask, structure=np.ones((3,) * mask.ndim))
    return centers[(mask & ~core).ravel()]


def hausdorff_to_shape(mask: np.ndarray, cfg: GridConfig, scale: float,
                       star: StarSet, refine: int = 8) -> float:
    """Hausdorff distance between a scaled cell mask and a star region.

    Both sets are solid; distances are evaluated between their boundaries
    with the usual solid-set convention (points inside the other set score
    zero), accurate to about one scaled grid cell plus the boundary sampling
    pitch of the star.
    """
    centers = cfg.centers()
    pts = _mask_boundary_centers(mask, centers) * scale
    if len(pts) == 0:
        raise ValueError("empty mask")
    bnd = star.boundary_points(refine)
    tree_b = cKDTree(bnd)

    outside = ~star.contains(pts)
    term_a = 0.0
    if outside.any():
        term_a = float(tree_b.query(pts[outside])[0].max())

    tree_a = cKDTree(pts)
    half_cell = 0.5 * cfg.h * math.sqrt(cfg.d) * scale
    inside_mask = np.empty(len(bnd), dtype=bool)
    for i, b in enumerate(bnd):
        inside_mask[i] = bool(mask[cfg.index_of(b / scale)])
    term_b = 0.0
    if (~inside_mask).any():
        q = tree_a.query(bnd[~inside_mask])[0]
        term_b = float(np.maximum(q - half_cell, 0.0).max())
    return max(term_a, term_b)


def _shape_plan(spec: FieldSpec, ts, h: float, dt: float | None):
    """Grid covering the largest requested time, plus its time cap."""
    t_max = max(ts)
    if dt is None:
        dt = 0.9 * h / (spec.speed_bound + 2.0)
    win_r = _half_aligned((spec.speed_bound + 1.0) * t_max + 3.0, h)
    cfg = GridConfig(window=Box.centered(np.zeros(spec.d), win_r), h=h, dt=dt)
    return cfg, t_max + 2 * dt


def _shape_trial(spec: FieldSpec, seed: int, cfg: GridConfig,
                 ts: Sequence[float], star: StarSet, rho: float | None,
                 t_cap: float, refine: int) -> np.ndarray:
    """One solve at the largest time; Hausdorff distance at every time."""
    field = build_field(spec.with_seed(int(seed)))
    pm = first_passage(field, np.zeros(spec.d), cfg, rho=rho, t_cap=t_cap)
    out = np.empty(len(ts))
    for j, t in enumerate(ts):
        mask = pm.theta <= t + _EPS
        out[j] = hausdorff_to_shape(mask, cfg, 1.0 / t, star, refine=refine)
    return out


def shape_convergence_experiment(spec: FieldSpec, ts: Sequence[float] = (25.0, 50.0, 100.0),
                                 trials: int = 30, *, est: ShapeEstimate | None = None,
                                 h: float = 0.5, dt: float | None = None,
                                 rho: float | None = None, seed: int = 0,
                                 est_trials: int | None = None,
                                 est_radii: Sequence[float] = (16.0, 32.0, 64.0),
                                 refine: int = 8) -> ShapeConvergenceReport:
    """Hausdorff distance between t^{-1} R_t(0) and the unit shape, per t.

    The reference shape comes from a rate estimate on the same grid, so the
    solver's direction-dependent bias cancels and the measured distance
    reflects genuine fluctuation rather than discretization.
    """
    ts = tuple(float(t) for t in ts)
    if est is None:
        est = estimate_theta_bar(spec, radii=est_radii,
                                 trials=est_trials or max(trials, 10),
                                 h=h, dt=dt, rho=rho, seed=seed + 0x5EED)
    star = shape_set(est, 1.0)
    cfg, t_cap = _shape_plan(spec, ts, h, dt)
    seeds = derive_seeds(seed, trials)
    vals = np.empty((trials, len(ts)))
    for i in range(trials):
        vals[i] = _shape_trial(spec, seeds[i], cfg, ts, star, rho,
                               t_cap, refine)
    return ShapeConvergenceReport(ts=ts, values=vals,
                                  medians=np.median(vals, axis=0))


# ---------------------------------------------------------------------------
# skeletons against the empirical mean oracle

class MeanPassageOracle:
    """Memoized E[theta(0, v)] from a shape estimate, safe for threads.

    Mean = rate(v) |v| plus an optional fitted power-law bias term.  Values
    are repeatable per argument; the standard error scales the same way.
    """

    def __init__(self, est: ShapeEstimate, bias_amplitude: float = 0.0,
                 bias_exponent: float = 0.5):
        self.est = est
        self.bias_amplitude = bias_amplitude
        self.bias_exponent = bias_exponent
        self._se_interp = _DirectionInterp(est.directions, est.theta_bar_se)
        self._memo: dict = {}
        self._lock = threading.Lock()

    def mean(self, v) -> float:
        key = tuple(np.round(np.asarray(v, dtype=np.float64), 9))
        with self._lock:
            if key not in self._memo:
                r = float(np.linalg.norm(key))
                base = self.est.theta_bar_at(np.asarray(key))
                bias = self.bias_amplitude * r**self.bias_exponent if r > 0 else 0.0
                self._memo[key] = base + bias
            return self._memo[key]

    __call__ = mean

    def se(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        r = float(np.linalg.norm(v))
        if r == 0.0:
            return 0.0
        return r * float(self._se_interp.at_units((v / r)[None, :])[0])


def passage_oracle(est: ShapeEstimate, bias_amplitude: float = 0.0,
                   bias_exponent: float = 0.5) -> SubadditiveOracle:
    """The empirical mean oracle wrapped for the convex machinery."""
    mem = MeanPassageOracle(est, bias_amplitude, bias_exponent)
    return SubadditiveOracle(f=mem, fbar=est.theta_bar_at)


def greedy_skeleton(path: np.ndarray, good: GoodSet, target) -> np.ndarray:
    """Waypoints along a realized path whose increments are good toward x.

    Follows the path as far as possible while some lattice point within
    distance 1 still makes a good increment from the current waypoint, takes
    that point, and repeats; finishes with the target once it is itself a
    good increment away.
    """
    path = np.asarray(path, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    d = path.shape[1]
    verts = [path[0].copy()]

    def good_site_near(pt, cur):
        best = None
        base = np.floor(pt).astype(np.int64)
        for off in np.ndindex(*(3,) * d):
            z = base + np.asarray(off) - 1
            if np.linalg.norm(z - pt) <= 1.0 + _EPS and good.contains(z - cur):
                key = tuple(int(c) for c in z)
                if best is None or key < best:
                    best = key
        return None if best is None else np.asarray(best, dtype=np.float64)

    i = 0
    for _ in range(4 * len(path) + 8):
        cur = verts[-1]
        if good.contains(target - cur):
            verts.append(target)
            return np.asarray(verts)
        pick = None
        for j in range(len(path) - 1, i, -1):
            z = good_site_near(path[j], cur)
            if z is not None:
                pick = (j, z)
                break
        if pick is None:
            raise RuntimeError(
                f"greedy skeleton stalled at waypoint {len(verts) - 1} near {tuple(cur)}")
        i, z = pick
        verts.append(z)
    raise RuntimeError("greedy skeleton did not terminate")


@dataclass
class SkeletonErrorReport:
    error: float
    lengths: np.ndarray
    expected: np.ndarray
    realized: np.ndarray
    eta: int
    reasonable: bool
    violations: list
    unreached: list


def skeleton_error(field: Field, vertices, mean_oracle, *, h: float = 0.25,
                   dt: float | None = None, eta: int | None = None,
                   window_factor: float = 1.4) -> SkeletonErrorReport:
    """Sum over legs of max(0, expected - realized) passage time.

    Also reports whether the skeleton is reasonable at scale eta: legs of
    comparable length (same dyadic bucket) separated by at least eta bucket
    positions must have endpoints at least (speed+1)(sum of expected times)+1
    apart, which is what makes same-scale error terms independent.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    legs = np.diff(verts, axis=0)
    lengths = np.linalg.norm(legs, axis=1)
    L = field.v_max
    if dt is None:
        dt = 0.9 * h / (L + 2.0)
    if eta is None:
        eta = max(2, math.ceil(4.0 * (L + 1.0)))

    expected = np.array([float(mean_oracle(w)) for w in legs])
    realized = np.empty(len(legs))
    unreached = []
    for k in range(len(legs)):
        src, dst = verts[k], verts[k + 1]
        radius = _half_aligned((L + 1.0) * expected[k] * window_factor + 3.0, h)
        cfg = GridConfig(window=Box.centered(src, radius), h=h, dt=dt)
        pm = first_passage(field, src, cfg, targets=dst[None, :],
                           t_cap=expected[k] * 2.0 + 10 * dt)
        realized[k] = pm.theta_at(dst)
        if not np.isfinite(realized[k]):
            unreached.append(k)
    error = float(np.sum(np.maximum(0.0, expected - np.where(
        np.isfinite(realized), realized, np.inf))))

    violations = []
    buckets: dict[int, list[int]] = {}
    for k, ln in enumerate(lengths):
        if ln > 0:
            buckets.setdefault(int(math.floor(math.log2(ln))), []).append(k)
    for bucket in buckets.values():
        for a in range(len(bucket)):
            for b in range(a + eta, len(bucket)):
                i, j = bucket[a], bucket[b]
                sep = float(np.linalg.norm(verts[j + 1] - verts[i + 1]))
                need = (L + 1.0) * (expected[i] + expected[j]) + 1.0
                if sep < need:
                    violations.append((i, j, sep, need))
    return SkeletonErrorReport(error=error, lengths=lengths, expected=expected,
                               realized=realized, eta=eta,
                               reasonable=not violations,
                               violations=violations, unreached=unreached)
