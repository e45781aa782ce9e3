"""Reachable sets and first-passage times for drift-plus-unit-speed motion.

Paths obey dX = (alpha + V(X)) dt with |alpha| <= 1, so the front moves at
most speed sup|V| + 1 and can always dilate at unit speed.  The solver floods
the grid with earliest arrival times: a hop between cell centers costs the
least tau solving |delta - tau * v| = tau, with the drift v read at the hop
midpoint on a half-step grid.  Arrival masks and quantized passage times are
derived from the one arrival field, so fronts are monotone by construction.

The rho-guaranteed variant adds a unit-ball dilation every rho time units,
realised as extra edges whose arrival rounds up to the next multiple of rho.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .fields import Field

_EPS = 1e-9


class WindowError(ValueError):
    """Window too small for the requested propagation."""


class GridConfigError(ValueError):
    """Inconsistent grid parameters."""


class BudgetError(RuntimeError):
    """A configured resource limit was exceeded."""


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise GridConfigError("window lo/hi dimension mismatch")
        for a, b in zip(self.lo, self.hi):
            if not b > a:
                raise GridConfigError(f"window must have hi > lo, got {self.lo}..{self.hi}")

    @property
    def d(self) -> int:
        return len(self.lo)

    @classmethod
    def centered(cls, center, radius: float) -> "Box":
        c = np.asarray(center, dtype=np.float64)
        return cls(tuple(c - radius), tuple(c + radius))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def margin(self, x) -> float:
        """Smallest distance from x to any face."""
        x = np.asarray(x, dtype=np.float64)
        return float(min(np.min(x - self.lo), np.min(np.asarray(self.hi) - x)))


@dataclass(frozen=True)
class GridConfig:
    """Spatial step, time step, window, and hop range of the front solver."""

    window: Box
    h: float = 0.25
    dt: float = 0.1
    neighbor_range: int | None = None
    max_cells: int = 50_000_000

    def __post_init__(self):
        if not self.h > 0:
            raise GridConfigError(f"h must be positive, got {self.h}")
        if not self.dt > 0:
            raise GridConfigError(f"dt must be positive, got {self.dt}")
        if self.neighbor_range is not None and self.neighbor_range < 1:
            raise GridConfigError(f"neighbor_range must be >= 1, got {self.neighbor_range}")

    @property
    def d(self) -> int:
        return self.window.d

    @property
    def shape(self) -> tuple[int, ...]:
        lo, hi = np.asarray(self.window.lo), np.asarray(self.window.hi)
        return tuple(max(1, int(math.ceil((hi[ax] - lo[ax]) / self.h - _EPS)))
                     for ax in range(self.d))

    @property
    def hops(self) -> int:
        if self.neighbor_range is not None:
            return self.neighbor_range
        return 3 if self.d == 2 else 2

    def n_cells(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def cfl_ratio(self, speed: float) -> float:
        """dt * (speed + 2) / h; must stay <= 1 for the front resolution model."""
        return self.dt * (speed + 2.0) / self.h

    def check_cfl(self, speed: float) -> None:
        if self.cfl_ratio(speed) > 1.0 + _EPS:
            raise GridConfigError(
                f"time step too coarse: dt*(speed+2)/h = {self.cfl_ratio(speed):.4g} > 1; "
                f"need dt <= {self.h / (speed + 2.0):.6g}")

    def index_of(self, x) -> tuple[int, ...]:
        x = np.asarray(x, dtype=np.float64)
        lo = np.asarray(self.window.lo)
        idx = np.floor((x - lo) / self.h).astype(np.int64)
        idx = np.minimum(np.maximum(idx, 0), np.asarray(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def center_of(self, idx) -> np.ndarray:
        lo = np.asarray(self.window.lo)
        return lo + (np.asarray(idx, dtype=np.float64) + 0.5) * self.h

    def centers(self) -> np.ndarray:
        """(n_cells, d) array of all cell centers, C order."""
        lo = np.asarray(self.window.lo)
        axes = [lo[ax] + (np.arange(self.shape[ax]) + 0.5) * self.h for ax in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


def primitive_offsets(d: int, k: int) -> np.ndarray:
    """Integer hop directions with sup-norm <= k and coprime coordinates."""
    offs = []
    for tup in itertools.product(range(-k, k + 1), repeat=d):
        if all(v == 0 for v in tup):
            continue
        g = 0
        for v in tup:
            g = math.gcd(g, abs(v))
        if g == 1:
            offs.append(tup)
    offs.sort()
    return np.array(offs, dtype=np.int64)


def _dilation_offsets(d: int, h: float) -> np.ndarray:
    m = int(math.floor(1.0 / h + _EPS))
    offs = []
    for tup in itertools.product(range(-m, m + 1), repeat=d):
        if all(v == 0 for v in tup):
            continue
        if sum(v * v for v in tup) * h * h <= 1.0 + 1e-12:
            offs.append(tup)
    offs.sort()
    if not offs:
        return np.zeros((0, d), dtype=np.int64)
    return np.array(offs, dtype=np.int64)


def hop_times(delta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised least hop times: solve |delta - tau v| = tau for tau >= 0."""
    delta = np.atleast_2d(delta)
    v = np.atleast_2d(v)
    dd = (delta * delta).sum(axis=1)
    vv = (v * v).sum(axis=1)
    dv = (delta * v).sum(axis=1)
    out = np.full(len(dd), np.inf)
    out[dd == 0.0] = 0.0
    sub = (vv < 1.0 - 1e-12) & (dd > 0.0)
    if sub.any():
        out[sub] = (dv[sub] + np.sqrt(dv[sub] ** 2 + (1.0 - vv[sub]) * dd[sub])) / (1.0 - vv[sub])
    crit = (np.abs(vv - 1.0) <= 1e-12) & (dd > 0.0)
    if crit.any():
        pos = crit & (dv > 0.0)
        out[pos] = dd[pos] / (2.0 * dv[pos])
    sup = (vv > 1.0 + 1e-12) & (dd > 0.0) & (dv > 0.0)
    if sup.any():
        disc = dv[sup] ** 2 - (vv[sup] - 1.0) * dd[sup]
        ok = disc >= 0.0
        vals = np.full(int(sup.sum()), np.inf)
        vals[ok] = (dv[sup][ok] - np.sqrt(disc[ok])) / (vv[sup][ok] - 1.0)
        out[sup] = vals
    return out


class _ArrivalField:
    """Shared guts of GridFront and PassageMap."""

    def __init__(self, field: Field, x0, config: GridConfig, direction: str,
                 rho: float, t_raw: np.ndarray, parent: np.ndarray):
        self.field = field
        self.source = np.asarray(x0, dtype=np.float64)
        self.config = config
        self.direction = direction
        self.rho = rho
        self.t_raw = t_raw
        self.parent = parent

    def mask_at(self, t: float) -> np.ndarray:
        return self.t_raw <= t + _EPS

    def path_to(self, y) -> np.ndarray:
        """Cell-center waypoints of the realised arrival path, source first."""
        cfg = self.config
        idx = np.ravel_multi_index(cfg.index_of(y), cfg.shape)
        if not np.isfinite(self.t_raw.ravel()[idx]):
            raise WindowError(f"target {np.asarray(y)} was not reached")
        chain = []
        cur = int(idx)
        seen = 0
        while cur >= 0:
            chain.append(cur)
            nxt = int(self.parent[cur])
            cur = nxt if nxt >= 0 else (-(nxt + 2) if nxt <= -2 else -1)
            seen += 1
            if seen > self.t_raw.size:
                raise RuntimeError("parent chain cycle")
        chain.reverse()
        pts = np.array([cfg.center_of(np.unravel_index(c, cfg.shape)) for c in chain])
        pts[0] = self.source
        return pts


class GridFront(_ArrivalField):
    """Monotone family of occupation masks M_k at times k*dt."""

    def __init__(self, *args, n_steps: int):
        super().__init__(*args)
        self.n_steps = n_steps

    def mask(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.n_steps:
            raise ValueError(f"step {k} outside 0..{self.n_steps}")
        return self.mask_at(k * self.config.dt)

    def cell_count(self, k: int) -> int:
        return int(self.mask(k).sum())

    def cells(self, k: int) -> np.ndarray:
        """Centers of occupied cells at step k."""
        return self.config.centers()[self.mask(k).ravel()]

    def envelope_violations(self, k: int) -> int:
        """Occupied cells outside ball(x0, (speed+1) k dt + h); should be 0."""
        r = (self.field.v_max + 1.0) * k * self.config.dt + self.config.h
        cen = self.config.centers()
        dist = np.sqrt(((cen - self.source) ** 2).sum(axis=1))
        return int(np.sum(self.mask(k).ravel() & (dist > r + _EPS)))


class PassageMap(_ArrivalField):
    """First-passage times from one source to every cell of the window."""

    @property
    def theta(self) -> np.ndarray:
        """Quantized passage times: dt * (first step whose mask covers the cell)."""
        q = self.config.dt * np.ceil(self.t_raw / self.config.dt - _EPS)
        return np.where(np.isfinite(self.t_raw), np.maximum(q, 0.0), np.inf)

    def raw_at(self, y) -> float:
        return float(self.t_raw[self.config.index_of(y)])

    def theta_at(self, y) -> float:
        raw = self.raw_at(y)
        if not np.isfinite(raw):
            return math.inf
        return float(self.config.dt * max(0.0, math.ceil(raw / self.config.dt - _EPS)))

    def reached(self, y) -> bool:
        return bool(np.isfinite(self.raw_at(y)))


def _solve(field: Field, x0, config: GridConfig, direction: str, rho: float | None,
           t_cap: float, targets=None) -> tuple[np.ndarray, np.ndarray, float]:
    d = field.d
    if config.d != d:
        raise GridConfigError(f"grid window is {config.d}-d but field is {d}-d")
    x0 = np.asarray(x0, dtype=np.float64)
    if not config.window.contains(x0):
        raise WindowError(f"source {x0} outside window {config.window.lo}..{config.window.hi}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    config.check_cfl(field.v_max)
    n_cells = config.n_cells()
    if n_cells > config.max_cells:
        raise BudgetError(
            f"window needs {n_cells} cells, over the limit {config.max_cells}")
    if rho is None or rho == math.inf:
        rho_eff = 0.0
    else:
        if not rho > 0:
            raise ValueError(f"rho must be positive (or None/inf for plain), got {rho}")
        rho_eff = float(rho)

    shape = config.shape
    lo = np.asarray(config.window.lo)
    h = config.h
    sign = 1.0 if direction == "forward" else -1.0
    half_shape = tuple(2 * s - 1 for s in shape)
    vh = field.sample_grid(lo + h / 2.0, h / 2.0, half_shape, sign=sign)

    k = config.hops
    edges = primitive_offsets(d, k)
    dil = _dilation_offsets(d, h) if rho_eff > 0.0 else np.zeros((0, d), dtype=np.int64)
    # column views must be contiguous or numba compiles an extra any-layout variant
    ecols = [np.ascontiguousarray(edges[:, ax]) for ax in range(d)]
    dcols = [np.ascontiguousarray(dil[:, ax]) if len(dil) else np.empty(0, np.int64)
             for ax in range(d)]

    # seed the source cell at 0 and its neighborhood by exact hops from x0
    src_idx = config.index_of(x0)
    rngs = [range(max(0, src_idx[ax] - k - 1), min(shape[ax], src_idx[ax] + k + 2))
            for ax in range(d)]
    seed_cells = np.array(list(itertools.product(*rngs)), dtype=np.int64)
    cen = lo + (seed_cells + 0.5) * h
    deltas = cen - x0
    mids = x0 + deltas / 2.0
    vmid = sign * field.eval_many(mids)
    st = hop_times(deltas, vmid)
    src_flat = int(np.ravel_multi_index(src_idx, shape))
    seed_flat = np.ravel_multi_index(tuple(seed_cells.T), shape).astype(np.int64)
    st[seed_flat == src_flat] = 0.0
    keep = np.isfinite(st)
    seed_flat, st = seed_flat[keep], st[keep]

    T = np.full(n_cells, np.inf)
    par = np.full(n_cells, -1, dtype=np.int64)
    tmask = np.zeros(n_cells, dtype=np.uint8)
    n_stop = 0
    if targets is not None:
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        for y in targets:
            if config.window.contains(y):
                tmask[np.ravel_multi_index(config.index_of(y), shape)] = 1
        n_stop = int(tmask.sum())

    seed_flat = np.ascontiguousarray(seed_flat)
    st = np.ascontiguousarray(st)
    if d == 2:
        _kernels.dijkstra_2d(vh, h, shape[0], shape[1], ecols[0], ecols[1],
                             seed_flat, st, rho_eff, dcols[0], dcols[1],
                             t_cap, tmask, n_stop, T, par)
    else:
        _kernels.dijkstra_3d(vh, h, shape[0], shape[1], shape[2],
                             ecols[0], ecols[1], ecols[2],
                             seed_flat, st, rho_eff, dcols[0], dcols[1], dcols[2],
                             t_cap, tmask, n_stop, T, par)
    return T.reshape(shape), par, rho_eff if rho_eff > 0.0 else math.inf


def propagate(field: Field, x0, t_max: float, config: GridConfig,
              direction: str = "forward", rho: float | None = None) -> GridFront:
    """Flood the reachable set from x0 for t_max time units.

    The window must contain ball(x0, (speed+1)*t_max + 1); the +1 pads for
    the seeding stencil and the guaranteed-dilation variant.
    """
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    need = (field.v_max + 1.0) * t_max + 1.0
    have = config.window.margin(x0)
    if have < need - _EPS:
        raise WindowError(
            f"window must contain ball(x0, (speed+1)*t_max + 1): "
            f"required margin {need:.3f}, available {have:.3f}")
    t_raw, par, rho_eff = _solve(field, x0, config, direction, rho,
                                 t_cap=t_max + config.dt)
    n_steps = int(math.floor(t_max / config.dt + _EPS))
    return GridFront(field, x0, config, direction, rho_eff, t_raw, par.ravel(),
                     n_steps=n_steps)


def first_passage(field: Field, x0, config: GridConfig, rho: float | None = None,
                  direction: str = "forward", targets=None,
                  t_cap: float = math.inf) -> PassageMap:
    """Earliest arrival times from x0 to every cell the window can resolve.

    Times near the window boundary can only be overestimated (paths are not
    allowed to leave the window), so leave a margin of (speed+1) * horizon
    around the cells that matter.
    """
    t_raw, par, rho_eff = _solve(field, x0, config, direction, rho,
                                 t_cap=t_cap, targets=targets)
    return PassageMap(field, x0, config, direction, rho_eff, t_raw, par.ravel())


# ---------------------------------------------------------------------------
# disc: snap a region to the scaled lattice d^{-1/2} Z^d

def disc_points(points, d: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Lattice points of d^{-1/2} Z^d within distance 1 of any input point."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        return np.zeros((0, d if d else 0))
    dim = pts.shape[1] if d is None else d
    q = 1.0 / math.sqrt(dim)
    found: set[tuple[int, ...]] = set()
    for p in pts:
        rngs = [range(int(math.ceil((p[ax] - 1.0) / q - tol)),
                      int(math.floor((p[ax] + 1.0) / q + tol)) + 1)
                for ax in range(dim)]
        for z in itertools.product(*rngs):
            zz = np.array(z, dtype=np.float64) * q
            if np.dot(zz - p, zz - p) <= (1.0 + tol) ** 2:
                found.add(z)
    if not found:
        return np.zeros((0, dim))
    arr = np.array(sorted(found), dtype=np.float64) * q
    return arr


def disc_mask(mask: np.ndarray, lo, h: float, tol: float = 1e-9) -> np.ndarray:
    """disc of a union of grid cells (boxes of side h), exact point-box distance."""
    mask = np.asarray(mask, dtype=bool)
    dim = mask.ndim
    if not mask.any():
        return np.zeros((0, dim))
    lo = np.asarray(lo, dtype=np.float64)
    idx = np.argwhere(mask)
    centers = lo + (idx + 0.5) * h
    q = 1.0 / math.sqrt(dim)
    bb_lo = centers.min(axis=0) - h / 2.0 - 1.0
    bb_hi = centers.max(axis=0) + h / 2.0 + 1.0
    rngs = [np.arange(int(math.ceil(bb_lo[ax] / q - tol)),
                      int(math.floor(bb_hi[ax] / q + tol)) + 1)
            for ax in range(dim)]
    mesh = np.meshgrid(*rngs, indexing="ij")
    cand = np.stack([g.ravel() for g in mesh], axis=1)
    cand_pts = cand * q
    # prefilter by center distance, then exact clamp test against the boxes
    tree = cKDTree(centers)
    groups = tree.query_ball_point(cand_pts, 1.0 + h * math.sqrt(dim) / 2.0 + tol)
    keep = np.zeros(len(cand), dtype=bool)
    half = h / 2.0
    for i, grp in enumerate(groups):
        if not grp:
            continue
        boxes = centers[grp]
        gap = np.abs(cand_pts[i] - boxes) - half
        gap = np.maximum(gap, 0.0)
        if np.any((gap * gap).sum(axis=1) <= (1.0 + tol) ** 2):
            keep[i] = True
    pts = cand_pts[keep]
    order = np.lexsort(tuple(pts[:, ax] for ax in range(dim - 1, -1, -1)))
    return pts[order]


# ---------------------------------------------------------------------------
# independent oracle: particle-cloud front on the Euler step digraph

_ORACLE_DIRS_2D = {
    n: np.array([[math.cos(2 * math.pi * j / n), math.sin(2 * math.pi * j / n)]
                 for j in range(n)])
    for n in (8, 16, 32)
}


def _oracle_controls(d: int, n_dirs: int) -> np.ndarray:
    if d == 2:
        if n_dirs not in _ORACLE_DIRS_2D:
            raise ValueError(f"n_dirs must be one of {sorted(_ORACLE_DIRS_2D)}, got {n_dirs}")
        dirs = _ORACLE_DIRS_2D[n_dirs]
    else:
        axes = np.concatenate([np.eye(3), -np.eye(3)])
        diag = np.array(list(itertools.product((-1.0, 1.0), repeat=3))) / math.sqrt(3.0)
        dirs = np.concatenate([axes, diag])
        if n_dirs >= 26:
            edge = [v for v in itertools.product((-1.0, 0.0, 1.0), repeat=3)
                    if sum(abs(c) for c in v) == 2.0]
            dirs = np.concatenate([dirs, np.array(edge) / math.sqrt(2.0)])
    return np.concatenate([np.zeros((1, d)), dirs])


def oracle_passage(field: Field, x0, targets, config: GridConfig,
                   n_dirs: int = 16, node_cap: int = 250_000,
                   t_cap: float | None = None) -> np.ndarray:
    """First passage by breadth-first search over single Euler steps.

    Particles carry exact continuous positions; each Euler step branches over
    the finite control set (rest plus n_dirs unit directions).  The cloud is
    thinned to one representative per pruning cell, whose pitch subdivides the
    grid cell and stays below half an Euler step so the front can always walk
    out of its own cell.  A target counts as hit when a live particle lands in
    the target's grid cell.  Completely independent of the arrival-time
    solver: no hop metric, no dilation, no midpoint sampling.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    d = field.d
    controls = _oracle_controls(d, n_dirs)
    dt = config.dt
    h = config.h
    lo = np.asarray(config.window.lo)
    shape = np.asarray(config.shape)
    sub = max(1, int(math.ceil(2.0 * h / dt)))
    fine_shape = shape * sub
    q = h / sub
    strides = np.cumprod(np.concatenate([[1], shape[::-1][:-1]]))[::-1].astype(np.int64)
    fstrides = np.cumprod(
        np.concatenate([[1], fine_shape[::-1][:-1]]))[::-1].astype(np.int64)
    if t_cap is None:
        far = np.max(np.sqrt(((targets - x0) ** 2).sum(axis=1)))
        t_cap = 2.5 * far + 10.0 * dt
    max_steps = int(math.ceil(t_cap / dt))

    def keys_of(pts, pitch, shp, strd):
        ij = np.floor((pts - lo) / pitch).astype(np.int64)
        ok = np.all((ij >= 0) & (ij < shp), axis=1)
        return (ij * strd).sum(axis=1), ok

    tkeys, tok = keys_of(targets, h, shape, strides)
    if not tok.all():
        raise WindowError("all oracle targets must lie inside the window")
    arrivals = np.full(len(targets), np.inf)
    visited = np.zeros(int(np.prod(fine_shape)), dtype=bool)
    fkey0, _ = keys_of(x0[None], q, fine_shape, fstrides)
    visited[fkey0[0]] = True
    hkey0, _ = keys_of(x0[None], h, shape, strides)
    arrivals[tkeys == hkey0[0]] = 0.0
    cloud = x0[None, :]
    for step in range(1, max_steps + 1):
        if not len(cloud) or not np.isinf(arrivals).any():
            break
        v = field.eval_many(cloud)
        children = (cloud[:, None, :] + dt * (v[:, None, :] + controls[None, :, :])).reshape(-1, d)
        fkeys, ok = keys_of(children, q, fine_shape, fstrides)
        children, fkeys = children[ok], fkeys[ok]
        fresh = ~visited[fkeys]
        children, fkeys = children[fresh], fkeys[fresh]
        if not len(children):
            break
        _, first = np.unique(fkeys, return_index=True)
        order = np.sort(first)  # keep enumeration order deterministic
        cloud = children[order]
        visited[fkeys[order]] = True
        if len(cloud) > node_cap:
            raise BudgetError(
                f"oracle cloud holds {len(cloud)} nodes at step {step}, cap {node_cap}")
        open_t = np.isinf(arrivals)
        if open_t.any():
            hkeys, _ = keys_of(cloud, h, shape, strides)
            hit = open_t & np.isin(tkeys, hkeys)
            arrivals[hit] = step * dt
    return arrivals


# ---------------------------------------------------------------------------
# external formats

def passage_to_csv(pmap: PassageMap, path) -> None:
    """One row per reached cell: center coordinates, quantized and raw times."""
    import csv as _csv

    cfg = pmap.config
    cen = cfg.centers()
    raw = pmap.t_raw.ravel()
    theta = pmap.theta.ravel()
    cols = ["x%d" % ax for ax in range(cfg.d)] + ["theta", "t_raw"]
    with open(path, "w", newline="\n") as fh:
        w = _csv.writer(fh)
        w.writerow(cols)
        for i in np.flatnonzero(np.isfinite(raw)):
            w.writerow([repr(float(c)) for c in cen[i]] + [repr(float(theta[i])), repr(float(raw[i]))])


_RLE_MAGIC = b"GFRL"


def mask_to_rle(mask: np.ndarray) -> bytes:
    """Compact run-length encoding of a boolean mask (starts with a 0-run)."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    if flat.size == 0:
        runs = np.zeros(0, dtype=np.int64)
    else:
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds)
        if flat[0]:
            runs = np.concatenate([[0], runs])
    head = struct.pack("<4sB", _RLE_MAGIC, mask.ndim)
    head += struct.pack(f"<{mask.ndim}q", *mask.shape)
    head += struct.pack("<q", len(runs))
    return head + runs.astype("<i8").tobytes()


def rle_to_mask(blob: bytes) -> np.ndarray:
    magic, nd = struct.unpack_from("<4sB", blob, 0)
    if magic != _RLE_MAGIC:
        raise ValueError("not a run-length mask blob")
    off = 5
    shape = struct.unpack_from(f"<{nd}q", blob, off)
    off += 8 * nd
    (nruns,) = struct.unpack_from("<q", blob, off)
    off += 8
    runs = np.frombuffer(blob, dtype="<i8", count=nruns, offset=off)
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += int(r)
        val = not val
    return flat.reshape(shape)
