"""Site percolation built from the flow: classification, closures, detours.

Sites of Z^d carry unit cubes sigma(v) = v + [-1/2, 1/2]^d.  A site is open
when local first-passage times across its surrounding ball stay below a
threshold, which happens with probability close to 1 for weak drift since the
law has finite range; open sites then dominate a high-density i.i.d. lattice.
Adjacency is always sup-norm (two sites touch when their cubes do).

The detour construction walks from x to y through the cubes of one open
cluster: straight stretches of length sqrt(d) where possible, and walks along
outer boundaries of blocking components where not.  Every step has length at
most sqrt(d) and the total count is controlled by the closure of the cubes
met by the straight segment.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .fields import Field
from .reach import Box, GridConfig, first_passage

_EPS = 1e-9

# Reference operating point: drift as strong as the control speed, with the
# classification threshold at the empirical 95th percentile of the per-site
# worst pairwise time (800 profiled sites, two field seeds), so the induced
# site process is open with probability about 0.95.
REFERENCE_AMPLITUDE = 1.0
REFERENCE_THRESHOLD = 2.833


class DomainError(ValueError):
    """Endpoints not usable for the requested construction."""


def _structure(d: int) -> np.ndarray:
    return np.ones((3,) * d, dtype=bool)


def _dilate(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=_structure(mask.ndim))


class SiteLattice:
    """Open/closed sites on an integer window origin + [0, shape)."""

    def __init__(self, open_sites: np.ndarray, origin=None):
        self.open_ = np.asarray(open_sites, dtype=bool)
        self.d = self.open_.ndim
        self.origin = (np.zeros(self.d, dtype=np.int64) if origin is None
                       else np.asarray(origin, dtype=np.int64))
        self._open_labels = None
        self._closed_labels = None

    # -- geometry ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.open_.shape

    def contains(self, site) -> bool:
        idx = np.asarray(site, dtype=np.int64) - self.origin
        return bool(np.all(idx >= 0) and np.all(idx < self.shape))

    def index(self, site) -> tuple[int, ...]:
        idx = np.asarray(site, dtype=np.int64) - self.origin
        if np.any(idx < 0) or np.any(idx >= self.shape):
            raise DomainError(f"site {tuple(site)} outside lattice window")
        return tuple(int(i) for i in idx)

    def sites(self, mask: np.ndarray) -> np.ndarray:
        """Integer coordinates of the set flagged by a window-shaped mask."""
        return np.argwhere(mask) + self.origin

    def is_open(self, site) -> bool:
        return bool(self.open_[self.index(site)])

    def open_fraction(self) -> float:
        return float(self.open_.mean())

    # -- clusters --------------------------------------------------------------

    def open_labels(self) -> np.ndarray:
        if self._open_labels is None:
            self._open_labels, _ = ndimage.label(self.open_, structure=_structure(self.d))
        return self._open_labels

    def closed_labels(self) -> np.ndarray:
        if self._closed_labels is None:
            self._closed_labels, _ = ndimage.label(~self.open_, structure=_structure(self.d))
        return self._closed_labels

    def cluster_mask(self, site) -> np.ndarray:
        """Open cluster through a site (empty mask if the site is closed)."""
        labels = self.open_labels()
        lab = labels[self.index(site)]
        if lab == 0:
            return np.zeros(self.shape, dtype=bool)
        return labels == lab

    # -- text format -----------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("# origin " + " ".join(str(int(v)) for v in self.origin) + "\n")
        arr = self.open_
        if self.d == 2:
            blocks = [arr]
        else:
            blocks = [arr[k] for k in range(arr.shape[0])]
        for bi, block in enumerate(blocks):
            if bi:
                out.write("\n")
            for row in block:
                out.write("".join("o" if v else "x" for v in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SiteLattice":
        lines = text.splitlines()
        origin = None
        rows: list[str] = []
        blocks: list[list[str]] = []
        for line in lines:
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "origin":
                    origin = [int(v) for v in parts[1:]]
                continue
            if not line.strip():
                if rows:
                    blocks.append(rows)
                    rows = []
                continue
            if set(line) - {"o", "x"}:
                raise ValueError(f"bad lattice row: {line!r}")
            rows.append(line)
        if rows:
            blocks.append(rows)
        if not blocks:
            raise ValueError("no lattice rows found")
        arrs = [np.array([[c == "o" for c in row] for row in rows_]) for rows_ in blocks]
        arr = arrs[0] if len(arrs) == 1 else np.stack(arrs)
        return cls(arr, origin=origin)


def random_lattice(radius: int, p: float, seed: int, d: int = 2) -> SiteLattice:
    """i.i.d. Bernoulli(p) sites on the centered cube of the given radius."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    shape = (2 * radius + 1,) * d
    return SiteLattice(rng.random(shape) < p, origin=np.full(d, -radius))


def random_connected_set(shape: tuple[int, ...], size: int, seed: int) -> np.ndarray:
    """Uniform-ish random connected set grown site by site (sup-norm adjacency)."""
    shape = tuple(shape)
    total = 1
    for s in shape:
        total *= s
    if not 1 <= size <= total:
        raise ValueError(f"size must lie in 1..{total}, got {size}")
    rng = np.random.default_rng(seed)
    d = len(shape)
    mask = np.zeros(shape, dtype=bool)
    start = tuple(rng.integers(0, s) for s in shape)
    mask[start] = True
    offs = [off for off in np.ndindex(*(3,) * d) if any(o != 1 for o in off)]
    frontier = set()

    def push_neighbors(site):
        for off in offs:
            nb = tuple(site[ax] + off[ax] - 1 for ax in range(d))
            if all(0 <= nb[ax] < shape[ax] for ax in range(d)) and not mask[nb]:
                frontier.add(nb)

    push_neighbors(start)
    while int(mask.sum()) < size:
        if not frontier:
            raise RuntimeError("ran out of frontier sites")
        pick = sorted(frontier)[rng.integers(0, len(frontier))]
        frontier.discard(pick)
        mask[pick] = True
        push_neighbors(pick)
    return mask


# ---------------------------------------------------------------------------
# classification of sites by local passage times

def _ball_pattern(d: int, spacing: float) -> np.ndarray:
    """Sample points of the radius-sqrt(d) ball on a spacing grid."""
    sqd = math.sqrt(d)
    m = int(math.floor(sqd / spacing))
    ax = np.arange(-m, m + 1) * spacing
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    pattern = np.stack([g.ravel() for g in mesh], axis=1)
    return pattern[(pattern**2).sum(axis=1) <= sqd**2 + _EPS]


def classify_sites(field: Field, origin, shape, c_thresh: float,
                   sample_spacing: float = 0.5, h: float = 0.25,
                   dt: float | None = None) -> SiteLattice:
    """Mark each site open when passage times across its ball stay small.

    A site v is open when theta(x, y) <= c_thresh for all sample pairs x, y
    from the ball of radius sqrt(d) around v (samples on a sample_spacing
    grid).  Raw arrival times are compared, not step-quantized ones, so the
    threshold resolves below the time step.  Passage is solved in a local
    window wide enough to contain every path of duration c_thresh.
    """
    if not c_thresh > 0:
        raise ValueError(f"c_thresh must be positive, got {c_thresh}")
    origin = np.asarray(origin, dtype=np.int64)
    shape = tuple(int(s) for s in shape)
    d = field.d
    if dt is None:
        dt = 0.9 * h / (field.v_max + 2.0)
    reach_r = math.sqrt(d) + (field.v_max + 1.0) * c_thresh + 1.0
    pattern = _ball_pattern(d, sample_spacing)

    open_ = np.zeros(shape, dtype=bool)
    for idx in np.ndindex(*shape):
        v = (origin + np.asarray(idx)).astype(np.float64)
        samples = v + pattern
        cfg = GridConfig(window=Box.centered(v, reach_r), h=h, dt=dt)
        ok = True
        for src in samples:
            pm = first_passage(field, src, cfg, targets=samples, t_cap=c_thresh + 2 * dt)
            for tgt in samples:
                if pm.raw_at(tgt) > c_thresh + _EPS:
                    ok = False
                    break
            if not ok:
                break
        open_[idx] = ok
    return SiteLattice(open_, origin=origin)


def site_time_profile(field: Field, origin, shape, sample_spacing: float = 0.5,
                      h: float = 0.25, dt: float | None = None,
                      t_cap: float = 6.0) -> np.ndarray:
    """Worst pairwise passage time across each site's ball.

    Used to calibrate the classification threshold: the open fraction at
    threshold c is the fraction of entries <= c.  Pairs slower than t_cap
    come back as inf.
    """
    origin = np.asarray(origin, dtype=np.int64)
    shape = tuple(int(s) for s in shape)
    d = field.d
    if dt is None:
        dt = 0.9 * h / (field.v_max + 2.0)
    reach_r = math.sqrt(d) + (field.v_max + 1.0) * t_cap + 1.0
    pattern = _ball_pattern(d, sample_spacing)

    worst = np.zeros(shape)
    for idx in np.ndindex(*shape):
        v = (origin + np.asarray(idx)).astype(np.float64)
        samples = v + pattern
        cfg = GridConfig(window=Box.centered(v, reach_r), h=h, dt=dt)
        w = 0.0
        for src in samples:
            pm = first_passage(field, src, cfg, targets=samples,
                               t_cap=t_cap + 2 * dt)
            w = max(w, max(pm.raw_at(t) for t in samples))
            if w == math.inf:
                break
        worst[idx] = w
    return worst


# ---------------------------------------------------------------------------
# closures and boundaries

def cl_of(lattice: SiteLattice, sites) -> np.ndarray:
    """Closure of S: union of closed clusters containing a closed site of S.

    Returns a window-shaped mask.  Open sites of S contribute nothing; an
    empty or all-open S gives the empty mask.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    mask = np.zeros(lattice.shape, dtype=bool)
    if sites.size == 0:
        return mask
    labels = lattice.closed_labels()
    ids = set()
    for s in sites:
        lab = labels[lattice.index(s)]
        if lab != 0:
            ids.add(int(lab))
    if not ids:
        return mask
    return np.isin(labels, sorted(ids))


def boundaries(region: np.ndarray, within_window: bool = False
               ) -> tuple[np.ndarray, np.ndarray]:
    """Inner and outer sup-norm boundaries of a region mask.

    By default the complement is taken in all of Z^d, so the region must keep
    one site of margin to the window border (the outer boundary has to fit).
    With within_window=True the complement is the window itself, as used for
    the per-component coherence checks.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return np.zeros_like(region), np.zeros_like(region)
    if not within_window:
        hull = np.zeros_like(region)
        sl = tuple(slice(1, -1) for _ in range(region.ndim))
        hull[sl] = True
        if np.any(region & ~hull):
            raise ValueError(
                "region touches the window border; a one-site margin is needed "
                "so the outer boundary fits in the window")
    # with the margin enforced above, the in-window complement sees every
    # site of Z^d adjacent to the region, so one formula serves both readings
    inner = region & _dilate(~region)
    outer = ~region & _dilate(region)
    return inner, outer


@dataclass
class UnicoherenceReport:
    ok: bool
    n_components: int
    failures: list[dict]

    def __bool__(self):
        return self.ok


def _mask_connected(mask: np.ndarray) -> bool:
    if not mask.any():
        return True
    _, n = ndimage.label(mask, structure=_structure(mask.ndim))
    return n == 1


def check_unicoherence(window_shape, connected_set: np.ndarray) -> UnicoherenceReport:
    """Per-component boundary connectivity for a connected set in a finite window.

    For each component D of the in-window complement of the set, both the
    inner boundary (sites of D next to the rest of the window) and the outer
    boundary (sites outside D next to D) must be sup-norm connected.
    """
    C = np.asarray(connected_set, dtype=bool)
    if tuple(window_shape) != C.shape:
        raise ValueError(f"window shape {tuple(window_shape)} != mask shape {C.shape}")
    if not C.any():
        raise ValueError("the set must be nonempty")
    if not _mask_connected(C):
        raise ValueError("the set must be sup-norm connected")
    comp, n_comp = ndimage.label(~C, structure=_structure(C.ndim))
    failures = []
    for lab in range(1, n_comp + 1):
        D = comp == lab
        inner, outer = boundaries(D, within_window=True)
        if not _mask_connected(inner):
            failures.append({"component": lab, "boundary": "inner", "mask": inner})
        if not _mask_connected(outer):
            failures.append({"component": lab, "boundary": "outer", "mask": outer})
    return UnicoherenceReport(ok=not failures, n_components=n_comp, failures=failures)


@dataclass
class GiantClusterReport:
    event: bool
    cluster_size: int
    worst_component: int

    def __bool__(self):
        return self.event


def giant_cluster_event(lattice: SiteLattice, r: int, n: int) -> GiantClusterReport:
    """Does the largest open cluster of Q_{r+n} leave only small holes near Q_r?

    True when every component of Q_{r+n} minus the largest open cluster that
    intersects Q_r has at most n sites.  Ties between equally large clusters
    go to the lowest label id.
    """
    if r < 0 or n < 0:
        raise ValueError("r and n must be nonnegative")
    side = r + n
    lo = -np.full(lattice.d, side, dtype=np.int64)
    hi = np.full(lattice.d, side, dtype=np.int64)
    idx_lo = lo - lattice.origin
    idx_hi = hi - lattice.origin
    if np.any(idx_lo < 0) or np.any(idx_hi >= lattice.shape):
        raise ValueError(
            f"lattice window must contain the centered cube of radius {side}")
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(idx_lo, idx_hi))
    sub = lattice.open_[sl]
    labels, n_lab = ndimage.label(sub, structure=_structure(lattice.d))
    if n_lab == 0:
        return GiantClusterReport(event=False, cluster_size=0, worst_component=sub.size)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    big = int(np.argmax(sizes))  # argmax takes the first maximum: lowest label
    C = labels == big
    comp, n_comp = ndimage.label(~C, structure=_structure(lattice.d))
    # restrict to components that intersect the inner cube Q_r
    center = tuple(slice(side - r, side + r + 1) for _ in range(lattice.d))
    touching = np.unique(comp[center])
    worst = 0
    comp_sizes = np.bincount(comp.ravel())
    for lab in touching:
        if lab == 0:
            continue
        worst = max(worst, int(comp_sizes[lab]))
    return GiantClusterReport(event=worst <= n, cluster_size=int(sizes[big]),
                              worst_component=worst)


# ---------------------------------------------------------------------------
# detour skeletons

@dataclass
class SkeletonPath:
    """Waypoints from x to y through one open cluster's cubes.

    cases[i] labels the segment points[i] -> points[i+1]: '1' final straight
    hop, '2' straight stretch of length sqrt(d), '3-enter'/'3-walk'/'3-exit'
    for the boundary walk around a blocking component.  component_ids lists
    the blocking components in walk order; the counting bound is
    2^d (1 + |x-y|) + |cl(A)| + (3^d + 2) |cl(A)| in terms of the closure of
    the straight segment's cube cover A.
    """

    points: np.ndarray
    cases: list[str]
    component_ids: list[int]
    a_count: int
    cl_a_count: int
    x: np.ndarray
    y: np.ndarray
    boundary_leaks: int = 0
    revisits: list[int] = dc_field(default_factory=list)

    @property
    def n_segments(self) -> int:
        return len(self.points) - 1

    def max_step(self) -> float:
        if self.n_segments == 0:
            return 0.0
        return float(np.max(np.sqrt((np.diff(self.points, axis=0) ** 2).sum(axis=1))))

    def counting_bound(self) -> float:
        d = self.points.shape[1]
        dist = float(np.linalg.norm(self.y - self.x))
        return 2**d * (1.0 + dist) + self.cl_a_count + (3**d + 2) * self.cl_a_count

    def within_counting_bound(self) -> bool:
        return self.n_segments <= self.counting_bound() + _EPS

    def to_csv(self, path) -> None:
        d = self.points.shape[1]
        with open(path, "w", newline="\n") as fh:
            w = csv.writer(fh)
            w.writerow(["x%d" % ax for ax in range(d)] + ["case"])
            w.writerow([repr(float(c)) for c in self.points[0]] + ["start"])
            for pt, case in zip(self.points[1:], self.cases):
                w.writerow([repr(float(c)) for c in pt] + [case])


def _covering_sites(pt: np.ndarray) -> np.ndarray:
    """Integer sites whose closed unit cube contains pt."""
    d = len(pt)
    los = np.ceil(pt - 0.5 - _EPS).astype(np.int64)
    his = np.floor(pt + 0.5 + _EPS).astype(np.int64)
    rngs = [np.arange(los[ax], his[ax] + 1) for ax in range(d)]
    mesh = np.meshgrid(*rngs, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _segment_crossings(p: np.ndarray, q: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sites whose cube meets segment [p, q], with entry and exit parameters."""
    d = len(p)
    lo = np.floor(np.minimum(p, q) - 0.5 - _EPS).astype(np.int64)
    hi = np.ceil(np.maximum(p, q) + 0.5 + _EPS).astype(np.int64)
    rngs = [np.arange(lo[ax], hi[ax] + 1) for ax in range(d)]
    mesh = np.meshgrid(*rngs, indexing="ij")
    cand = np.stack([g.ravel() for g in mesh], axis=1).astype(np.float64)
    dirv = q - p
    t_in = np.zeros(len(cand))
    t_out = np.ones(len(cand))
    ok = np.ones(len(cand), dtype=bool)
    for ax in range(d):
        lo_f = cand[:, ax] - 0.5 - _EPS
        hi_f = cand[:, ax] + 0.5 + _EPS
        if abs(dirv[ax]) < 1e-14:
            ok &= (p[ax] >= lo_f) & (p[ax] <= hi_f)
            continue
        t1 = (lo_f - p[ax]) / dirv[ax]
        t2 = (hi_f - p[ax]) / dirv[ax]
        t_in = np.maximum(t_in, np.minimum(t1, t2))
        t_out = np.minimum(t_out, np.maximum(t1, t2))
    ok &= t_in <= t_out + _EPS
    return cand[ok].astype(np.int64), t_in[ok], t_out[ok]


def _segment_cover_sites(p, q):
    sites, _, _ = _segment_crossings(np.asarray(p, float), np.asarray(q, float))
    return sites


def detour_skeleton(lattice: SiteLattice, x, y, max_events: int | None = None
                    ) -> SkeletonPath:
    """Chain of waypoints from x to y through the cubes of one open cluster.

    Both endpoints must lie in cubes of the same open cluster, else a
    DomainError.  The walk needs the blocking components and their outer
    boundaries to fit inside the lattice window; give the window a margin
    around everything the segment can touch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = lattice.d
    sqd = math.sqrt(d)

    def open_site_at(pt):
        best = None
        for v in _covering_sites(pt):
            if lattice.contains(v) and lattice.is_open(v):
                key = tuple(int(c) for c in v)
                if best is None or key < best:
                    best = key
        return best

    sx = open_site_at(x)
    sy = open_site_at(y)
    if sx is None:
        raise DomainError(f"x = {tuple(x)} is not covered by any open cube")
    if sy is None:
        raise DomainError(f"y = {tuple(y)} is not covered by any open cube")
    labels = lattice.open_labels()
    lab = labels[lattice.index(sx)]
    if labels[lattice.index(sy)] != lab:
        raise DomainError("x and y lie in different open clusters")
    C = labels == lab

    def c_site_at(pt):
        for v in _covering_sites(pt):
            if lattice.contains(v) and C[lattice.index(v)]:
                return tuple(int(c) for c in v)
        return None

    # cube cover of the full straight segment and its closure
    a_sites, _, _ = _segment_crossings(x, y)
    a_in_window = [s for s in a_sites if lattice.contains(s)]
    a_count = len(a_sites)
    cl_a = 0
    comp_full, _ = ndimage.label(~C, structure=_structure(d))
    ids_meeting_a = set()
    for s in a_in_window:
        idx = lattice.index(s)
        if not C[idx] and comp_full[idx] != 0:
            ids_meeting_a.add(int(comp_full[idx]))
    if ids_meeting_a:
        cl_a = int(np.isin(comp_full, sorted(ids_meeting_a)).sum())

    points = [x.copy()]
    cases: list[str] = []
    comp_ids: list[int] = []
    revisits: list[int] = []
    leaks = 0
    seen: set[int] = set()
    cur = x.copy()
    if max_events is None:
        max_events = 1000 + 40 * int(2**d * (1 + np.linalg.norm(y - x)) + (3**d + 3) * max(cl_a, 1))

    for _ in range(max_events):
        gap = y - cur
        dist = float(np.linalg.norm(gap))
        if dist <= sqd + _EPS:
            points.append(y.copy())
            cases.append("1")
            return SkeletonPath(np.array(points), cases, comp_ids, a_count, cl_a,
                                x, y, boundary_leaks=leaks, revisits=revisits)
        dirv = gap / dist
        z = cur + sqd * dirv
        if c_site_at(z) is not None:
            points.append(z)
            cases.append("2")
            cur = z
            continue

        # case 3: walk the outer boundary of the blocking component
        sites, t_in, t_out = _segment_crossings(cur, y)
        order = np.argsort(t_in, kind="stable")
        sites, t_in, t_out = sites[order], t_in[order], t_out[order]
        in_c = np.array([lattice.contains(s) and C[lattice.index(s)] for s in sites])
        # farthest parameter reachable through consecutive open cubes from cur
        t_star = 0.0
        p1 = None
        progressing = True
        while progressing:
            progressing = False
            for k in np.flatnonzero(in_c):
                if t_in[k] <= t_star + _EPS and t_out[k] > t_star + _EPS:
                    t_star = float(t_out[k])
                    p1 = tuple(int(c) for c in sites[k])
                    progressing = True
        if p1 is None:
            raise DomainError(f"no open cube covers the segment start near {tuple(cur)}")
        xt = cur + min(t_star, 1.0) * (y - cur)

        blockers = [tuple(int(c) for c in s)
                    for k, s in enumerate(sites)
                    if t_in[k] <= t_star + 1e-6 and t_out[k] > t_star + 1e-6
                    and not in_c[k]]
        if not blockers:
            raise RuntimeError("blocked segment without a blocking cube; "
                               "geometry tolerance too tight")
        blocker = min(blockers)
        if not lattice.contains(blocker):
            raise DomainError(
                f"blocking site {blocker} outside the lattice window; enlarge the margin")
        fid = int(comp_full[lattice.index(blocker)])
        if fid in seen:
            revisits.append(fid)
        seen.add(fid)
        comp_ids.append(fid)

        F = comp_full == fid
        outer = ~F & _dilate(F)
        if np.any(outer & ~C):
            leaks += int(np.sum(outer & ~C))
            outer &= C
        # exit cube: on the boundary, meets the segment strictly ahead of cur
        seg_len2 = float(np.dot(y - x, y - x))
        t_cur = float(np.dot(cur - x, y - x)) / seg_len2
        ex_sites, ex_in, ex_out = _segment_crossings(x, y)
        exit_candidates = []
        for k, s in enumerate(ex_sites):
            if lattice.contains(s) and outer[lattice.index(s)] \
                    and ex_out[k] > t_cur + _EPS:
                exit_candidates.append((tuple(int(c) for c in s), float(ex_out[k])))
        if not exit_candidates:
            raise DomainError(
                "no exit cube on the outer boundary meets the segment ahead; "
                "enlarge the lattice window margin")
        gain = [float(np.dot(np.asarray(s, float), y - x)) for s, _ in exit_candidates]
        best = max(range(len(exit_candidates)),
                   key=lambda i: (gain[i], tuple(-c for c in exit_candidates[i][0])))
        p_exit, t_exit = exit_candidates[best]

        walk = _bfs_path(outer, lattice.index(p1), lattice.index(p_exit))
        if walk is None:
            raise DomainError(
                "outer boundary walk failed; enlarge the lattice window margin")
        points.append(xt)
        cases.append("3-enter")
        for step_idx in walk:
            pt = (np.asarray(step_idx, dtype=np.float64) + lattice.origin)
            points.append(pt)
            cases.append("3-walk")
        xnext = x + min(t_exit, 1.0) * (y - x)
        points.append(xnext)
        cases.append("3-exit")
        cur = xnext
    raise RuntimeError(f"skeleton walk exceeded {max_events} events")


def _bfs_path(mask: np.ndarray, start: tuple[int, ...], goal: tuple[int, ...]
              ) -> list[tuple[int, ...]] | None:
    """Shortest sup-norm path of sites through a mask, start and goal inclusive."""
    if not mask[start] or not mask[goal]:
        return None
    d = mask.ndim
    offs = [off for off in np.ndindex(*(3,) * d) if any(o != 1 for o in off)]
    prev: dict[tuple[int, ...], tuple[int, ...] | None] = {start: None}
    dq = deque([start])
    while dq:
        cur = dq.popleft()
        if cur == goal:
            out = []
            node: tuple[int, ...] | None = cur
            while node is not None:
                out.append(node)
                node = prev[node]
            out.reverse()
            return out
        for off in offs:
            nb = tuple(cur[ax] + off[ax] - 1 for ax in range(d))
            if all(0 <= nb[ax] < mask.shape[ax] for ax in range(d)) \
                    and mask[nb] and nb not in prev:
                prev[nb] = cur
                dq.append(nb)
    return None
