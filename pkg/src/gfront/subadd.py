"""Constructive convex tools for near-subadditive functions.

Three building blocks used by the scaling analysis: a prefix-balanced
rearrangement of vector lists (every prefix of the returned order stays
within 2d of the proportional point), Caratheodory reduction of hull
certificates to d+1 points, and the two-step reduction that turns a skeleton
of "good" increments toward x into a gap bound at every scale, reported
level by level under doubling.

Functions are pure given their oracle.  Oracles must be safe to call
concurrently and repeatable per argument; wrap Monte Carlo estimates in a
memo table before handing them in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import linalg, optimize

_TOL = 1e-9


# ---------------------------------------------------------------------------
# kernel vectors, float and exact

def _null_vector_float(mat: np.ndarray) -> np.ndarray | None:
    ns = linalg.null_space(mat)
    if ns.shape[1] == 0:
        return None
    v = ns[:, 0]
    lead = np.flatnonzero(np.abs(v) > 1e-12)
    if len(lead) and v[lead[0]] < 0:
        v = -v
    return v


def _null_vector_exact(rows: list[list[Fraction]], ncols: int
                       ) -> list[Fraction] | None:
    mat = [row[:] for row in rows]
    pivots: dict[int, int] = {}
    r = 0
    for c in range(ncols):
        pr = next((i for i in range(r, len(mat)) if mat[i][c] != 0), None)
        if pr is None:
            continue
        mat[r], mat[pr] = mat[pr], mat[r]
        pv = mat[r][c]
        mat[r] = [v / pv for v in mat[r]]
        for i in range(len(mat)):
            if i != r and mat[i][c] != 0:
                f = mat[i][c]
                mat[i] = [a - f * b for a, b in zip(mat[i], mat[r])]
        pivots[c] = r
        r += 1
        if r == len(mat):
            break
    free = [c for c in range(ncols) if c not in pivots]
    if not free:
        return None
    fc = free[0]
    vec = [Fraction(0)] * ncols
    vec[fc] = Fraction(1)
    for c, pr in pivots.items():
        vec[c] = -mat[pr][fc]
    return vec


# ---------------------------------------------------------------------------
# rearrangement

def _is_exact_input(vectors) -> bool:
    try:
        return all(isinstance(c, (int, Fraction)) and not isinstance(c, bool)
                   for v in vectors for c in v)
    except TypeError:
        return False


def _walk_to_basic_float(alpha: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Push a feasible point of {A a = b, 0 <= a <= 1} onto a basic solution.

    cols is the (d+1) x n constraint matrix; moves happen inside its kernel
    restricted to strictly fractional coordinates, so A a stays fixed.
    """
    alpha = alpha.copy()
    for _ in range(4 * (alpha.size + cols.shape[0] + 2)):
        frac = np.flatnonzero((alpha > 1e-10) & (alpha < 1.0 - 1e-10))
        if len(frac) == 0:
            return alpha
        nu = _null_vector_float(cols[:, frac])
        if nu is None:
            return alpha
        steps = np.full(len(frac), np.inf)
        pos = nu > 1e-14
        neg = nu < -1e-14
        steps[pos] = (1.0 - alpha[frac][pos]) / nu[pos]
        steps[neg] = alpha[frac][neg] / -nu[neg]
        t = steps.min()
        if not np.isfinite(t):
            raise RuntimeError("unbounded kernel direction in coefficient walk")
        alpha[frac] += t * nu
        alpha[alpha < 1e-10] = 0.0
        alpha[alpha > 1.0 - 1e-10] = 1.0
    raise RuntimeError("coefficient walk failed to reach a basic solution")


def _walk_to_basic_exact(alpha: list[Fraction], cols: list[list[Fraction]]
                         ) -> list[Fraction]:
    alpha = alpha[:]
    n = len(alpha)
    for _ in range(4 * (n + len(cols) + 2)):
        frac = [i for i in range(n) if 0 < alpha[i] < 1]
        if not frac:
            return alpha
        sub = [[row[i] for i in frac] for row in cols]
        nu = _null_vector_exact(sub, len(frac))
        if nu is None:
            return alpha
        t = None
        for a_i, nu_i in zip((alpha[i] for i in frac), nu):
            if nu_i > 0:
                cand = (1 - a_i) / nu_i
            elif nu_i < 0:
                cand = a_i / -nu_i
            else:
                continue
            t = cand if t is None else min(t, cand)
        if t is None:
            raise RuntimeError("unbounded kernel direction in coefficient walk")
        for k, i in enumerate(frac):
            alpha[i] = alpha[i] + t * nu[k]
    raise RuntimeError("coefficient walk failed to reach a basic solution")


def rearrange(vectors, x=None, exact: bool | None = None,
              return_certificates: bool = False):
    """Order unit-ball vectors so every prefix tracks the proportional point.

    The vectors must satisfy sum(v_i) = n x; x defaults to their mean.  The
    returned permutation sigma keeps |v_{sigma(1)} + ... + v_{sigma(k)} - kx|
    at most 2d for every k.  Construction: keep coefficients a_i in [0, 1]
    with sum a_i = (n'-d) and sum a_i v_i = (n'-d) x over the n' remaining
    vectors, walk to a basic solution after scaling down one slot, drop an
    index whose coefficient reached zero, and recurse; dropped indices fill
    the permutation from the back.

    With exact=True (or rational input) everything runs in Fraction
    arithmetic and the certificates are exact.  The bound is re-verified on
    the result; failure signals an arithmetic bug, not bad input.
    """
    vs = [tuple(v) for v in vectors]
    n = len(vs)
    if n == 0:
        return (np.empty(0, dtype=np.int64), []) if return_certificates else np.empty(0, dtype=np.int64)
    d = len(vs[0])
    if exact is None:
        exact = _is_exact_input(vs) and (x is None or _is_exact_input([x]))

    if exact:
        fvs = [tuple(Fraction(c) for c in v) for v in vs]
        for i, v in enumerate(fvs):
            if sum(c * c for c in v) > 1:
                raise ValueError(f"vector {i} lies outside the unit ball")
        total = [sum(v[ax] for v in fvs) for ax in range(d)]
        fx = (tuple(t / n for t in total) if x is None
              else tuple(Fraction(c) for c in x))
        if any(total[ax] != n * fx[ax] for ax in range(d)):
            raise ValueError("vector sum must equal n times x")
        perm, certs = _rearrange_exact(fvs, fx, d, n)
        xf = np.array([float(c) for c in fx])
        arr = np.array([[float(c) for c in v] for v in fvs])
    else:
        arr = np.asarray(vectors, dtype=np.float64)
        n, d = arr.shape
        norms = np.sqrt((arr**2).sum(axis=1))
        if norms.max(initial=0.0) > 1.0 + 1e-9:
            raise ValueError(f"vector {int(np.argmax(norms))} lies outside the unit ball")
        xf = arr.mean(axis=0) if x is None else np.asarray(x, dtype=np.float64)
        if np.max(np.abs(arr.sum(axis=0) - n * xf)) > 1e-9 * max(1.0, n):
            raise ValueError("vector sum must equal n times x")
        perm, certs = _rearrange_float(arr, xf, d, n)

    # re-verify the advertised bound; a breach means the construction broke
    if sorted(perm) != list(range(n)):
        raise RuntimeError("infeasible certificate: result is not a permutation")
    prefixes = np.cumsum(arr[perm], axis=0)
    ks = np.arange(1, n + 1)[:, None]
    dev = np.sqrt(((prefixes - ks * xf) ** 2).sum(axis=1)).max()
    if dev > 2 * d + 1e-6:
        raise RuntimeError(f"infeasible certificate: prefix deviation {dev:.6f} > {2*d}")
    out = np.asarray(perm, dtype=np.int64)
    return (out, certs) if return_certificates else out


def _rearrange_float(arr, xf, d, n):
    cols = np.vstack([arr.T, np.ones(n)])
    active = list(range(n))
    alpha = np.full(n, (n - d) / n) if n > d else np.zeros(n)
    certs = [(active.copy(), alpha.copy())]
    tail: list[int] = []
    while len(active) > d:
        nn = len(active)
        scale = (nn - 1 - d) / (nn - d)
        mu = _walk_to_basic_float(alpha * scale, cols[:, active])
        zeros = np.flatnonzero(mu <= 1e-9)
        if len(zeros) == 0:
            raise RuntimeError("infeasible certificate: no removable coefficient")
        j = int(zeros[0])
        tail.append(active[j])
        del active[j]
        alpha = np.delete(mu, j)
        certs.append((active.copy(), alpha.copy()))
    perm = sorted(active) + list(reversed(tail))
    return perm, certs


def _rearrange_exact(fvs, fx, d, n):
    one = Fraction(1)
    cols = [[fvs[i][ax] for i in range(n)] for ax in range(d)]
    cols.append([one] * n)
    active = list(range(n))
    alpha = ([Fraction(n - d, n)] * n) if n > d else [Fraction(0)] * n
    certs = [(active.copy(), alpha[:])]
    tail: list[int] = []
    while len(active) > d:
        nn = len(active)
        scale = Fraction(nn - 1 - d, nn - d)
        sub = [[row[i] for i in active] for row in cols]
        mu = _walk_to_basic_exact([a * scale for a in alpha], sub)
        j = next((k for k, v in enumerate(mu) if v == 0), None)
        if j is None:
            raise RuntimeError("infeasible certificate: no removable coefficient")
        tail.append(active[j])
        del active[j]
        alpha = mu[:j] + mu[j + 1:]
        certs.append((active.copy(), alpha[:]))
    perm = sorted(active) + list(reversed(tail))
    return perm, certs


def check_certificates(vectors, x, certs, tol: float = 1e-7) -> float:
    """Residual of the coefficient equations across all recursion levels."""
    arr = np.asarray(vectors, dtype=np.float64)
    d = arr.shape[1]
    xf = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for active, alpha in certs:
        al = np.asarray(alpha, dtype=np.float64)
        if np.any(al < -tol) or np.any(al > 1 + tol):
            return math.inf
        target = max(len(active) - d, 0)
        worst = max(worst, abs(float(al.sum()) - target))
        res = al @ arr[active] - target * xf
        worst = max(worst, float(np.abs(res).max(initial=0.0)))
    return worst


def prefix_deviation(vectors, x, perm) -> float:
    """max_k |v_{perm 1} + ... + v_{perm k} - k x| for a given order."""
    arr = np.asarray(vectors, dtype=np.float64)[np.asarray(perm, dtype=np.int64)]
    xf = np.asarray(x, dtype=np.float64)
    pref = np.cumsum(arr, axis=0) - np.arange(1, len(arr) + 1)[:, None] * xf
    return float(np.sqrt((pref**2).sum(axis=1)).max(initial=0.0))


# ---------------------------------------------------------------------------
# Caratheodory reduction

def caratheodory(points, target, tol: float = _TOL):
    """Convex weights on at most d+1 of the points reproducing the target.

    Returns (indices, weights).  Raises ValueError when the target is not in
    the convex hull.
    """
    pts = np.asarray(points, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    n, d = pts.shape
    exact = np.flatnonzero(np.sqrt(((pts - tgt) ** 2).sum(axis=1)) <= tol)
    if len(exact):
        return np.array([exact[0]], dtype=np.int64), np.array([1.0])

    A = np.vstack([pts.T, np.ones(n)])
    b = np.append(tgt, 1.0)
    res = optimize.linprog(np.zeros(n), A_eq=A, b_eq=b, bounds=(0, None),
                           method="highs")
    if not res.success:
        raise ValueError("target lies outside the convex hull of the points")
    lam = np.clip(res.x, 0.0, None)

    for _ in range(n + 1):
        sup = np.flatnonzero(lam > 1e-12)
        if len(sup) <= 1:
            break
        nu = _null_vector_float(A[:, sup])
        if nu is None:
            break
        neg = nu < -1e-14
        if not neg.any():
            nu = -nu
            neg = nu < -1e-14
        if not neg.any():
            break
        t = float((lam[sup][neg] / -nu[neg]).min())
        lam[sup] += t * nu
        lam[lam < 1e-12] = 0.0

    sup = np.flatnonzero(lam > 1e-12)
    w = lam[sup]
    w = w / w.sum()
    resid = float(np.linalg.norm(pts[sup].T @ w - tgt))
    if resid > 10 * tol or len(sup) > d + 1:
        raise RuntimeError(
            f"hull reduction failed: support {len(sup)}, residual {resid:.2e}")
    return sup.astype(np.int64), w


# ---------------------------------------------------------------------------
# oracles and good sets

@dataclass(frozen=True)
class SubadditiveOracle:
    """A nonnegative subadditive f on Z^d with its homogenized limit.

    f grows at most linearly; fbar is the positively homogeneous convex
    limit.  support_grad(x) must return a vector g with g . x = fbar(x) and
    g . v <= fbar(v) for all v (a supporting functional at x), constant
    along rays.  When omitted, a central-difference gradient of fbar at
    x/|x| is used, which is deterministic and ray-consistent but assumes
    fbar is smooth at that direction.
    """

    f: Callable
    fbar: Callable
    support_grad: Callable | None = None

    def grad_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.support_grad is not None:
            return np.asarray(self.support_grad(x), dtype=np.float64)
        u = x / np.linalg.norm(x)
        h = 1e-6
        g = np.empty(len(u))
        for ax in range(len(u)):
            e = np.zeros(len(u))
            e[ax] = h
            g[ax] = (self.fbar(u + e) - self.fbar(u - e)) / (2 * h)
        return g


@dataclass(frozen=True)
class GoodSet:
    """Increments toward x: short, no overshoot, and nearly additive.

    v belongs when |v| <= K|x|, the supporting functional at x gives
    l_x(v) <= l_x(x), and f(v) <= l_x(v) + C |x|^nu phi(|x|).
    """

    oracle: SubadditiveOracle
    x: tuple
    C: float
    K: float
    nu: float
    phi: Callable = lambda r: 1.0

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(c) for c in self.x))
        object.__setattr__(self, "_grad", self.oracle.grad_at(np.asarray(self.x)))

    def support_value(self, v) -> float:
        return float(self._grad @ np.asarray(v, dtype=np.float64))

    def slack_budget(self) -> float:
        r = float(np.linalg.norm(self.x))
        return self.C * r**self.nu * self.phi(r)

    def reasons(self, v) -> list[str]:
        v = np.asarray(v, dtype=np.float64)
        out = []
        r = float(np.linalg.norm(self.x))
        if np.linalg.norm(v) > self.K * r + _TOL:
            out.append(f"|v| = {np.linalg.norm(v):.6g} exceeds K|x| = {self.K * r:.6g}")
        lv = self.support_value(v)
        lx = self.support_value(self.x)
        if lv > lx + _TOL:
            out.append(f"support value {lv:.6g} overshoots {lx:.6g}")
        if self.oracle.f(v) > lv + self.slack_budget() + _TOL:
            out.append(f"f(v) = {self.oracle.f(v):.6g} exceeds the additivity budget")
        return out

    def contains(self, v) -> bool:
        return not self.reasons(v)


# ---------------------------------------------------------------------------
# the two reduction steps

@dataclass
class HullCertificate:
    """alpha x as a uniform convex combination of skeleton increments."""

    x: np.ndarray
    n: float
    m: int
    alpha: float
    increments: np.ndarray
    good: GoodSet
    support_check: float


def alexander_step1(oracle: SubadditiveOracle, x, skeleton, good: GoodSet
                    ) -> HullCertificate:
    """Certify that alpha x lies in the hull of good increments toward x.

    skeleton is the vertex list 0 = v_0, ..., v_m = n x.  Every increment
    must pass the good-set test; the count inequality m >= n is recovered by
    applying the supporting functional to both sides of the telescoping sum.
    """
    x = np.asarray(x, dtype=np.float64)
    verts = np.asarray(skeleton, dtype=np.float64)
    if np.linalg.norm(verts[0]) > _TOL:
        raise ValueError("skeleton must start at the origin")
    end = verts[-1]
    r2 = float(x @ x)
    n = float(end @ x) / r2
    if np.linalg.norm(end - n * x) > 1e-6 * max(1.0, np.linalg.norm(end)):
        raise ValueError("skeleton endpoint is not a multiple of x")
    if n <= 0:
        raise ValueError("skeleton must end at a positive multiple of x")
    incs = np.diff(verts, axis=0)
    m = len(incs)
    for k, w in enumerate(incs):
        why = good.reasons(w)
        if why:
            raise ValueError(f"skeleton increment {k} is not good: " + "; ".join(why))
    lx = good.support_value(x)
    lsum = sum(good.support_value(w) for w in incs)
    support_check = abs(lsum - n * lx)
    # each term is at most lx, so the telescoped identity forces m >= n
    if m < n - 1e-6:
        raise ValueError(f"skeleton has m = {m} < n = {n:.6g} increments")
    return HullCertificate(x=x, n=n, m=m, alpha=n / m, increments=incs,
                           good=good, support_check=support_check)


@dataclass
class ReduceReport:
    """Outcome of splitting tx into a short remainder plus good increments."""

    x: np.ndarray
    t: float
    z: np.ndarray
    increments: np.ndarray
    counts: np.ndarray
    m_total: int
    z_bound: float
    gap_lhs: float
    gap_rhs: float
    step_slack: float
    verified_subadditive: bool
    verified_good: bool

    def to_json(self) -> str:
        return json.dumps({
            "t": self.t,
            "z": [float(c) for c in self.z],
            "m_total": int(self.m_total),
            "z_bound": self.z_bound,
            "gap_lhs": self.gap_lhs,
            "gap_rhs": self.gap_rhs,
            "step_slack": self.step_slack,
            "verified_subadditive": self.verified_subadditive,
            "verified_good": self.verified_good,
        })


def alexander_reduce(oracle: SubadditiveOracle, cert: HullCertificate, x, t: float
                     ) -> ReduceReport:
    """Split tx = z + sum of good increments and report the gap inequality.

    The hull certificate is reduced to d+1 support increments, scaled by
    t/alpha, and floored; the fractional part is the remainder z, computed in
    integer arithmetic, with |z| <= (d+1) K |x|.  The resulting inequality
    f(tx) - fbar(tx) <= f(z) - fbar(z) + additivity budget is evaluated and
    reported, not asserted.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.linalg.norm(x - cert.x) > _TOL:
        raise ValueError("certificate is stale: it was built for a different x")
    txf = t * x
    tx = np.rint(txf)
    if np.abs(tx - txf).max() > 1e-9:
        raise ValueError("t x must be a lattice point")
    tx = tx.astype(np.int64)
    d = len(x)

    idx, p = caratheodory(cert.increments, cert.alpha * x)
    w = np.rint(cert.increments[idx]).astype(np.int64)
    if np.abs(cert.increments[idx] - w).max() > 1e-9:
        raise ValueError("skeleton increments must be lattice vectors")
    c = t * p / cert.alpha
    counts = np.floor(c + 1e-12).astype(np.int64)
    z = tx - (counts[:, None] * w).sum(axis=0)

    r = float(np.linalg.norm(x))
    z_bound = (d + 1) * cert.good.K * r
    m_total = int(counts.sum())

    f, fbar = oracle.f, oracle.fbar
    gap_lhs = f(tx) - fbar(tx)
    good_ok = all(cert.good.contains(wi) for wi in w)
    sub_lhs = f(tx)
    sub_rhs = f(z) + float(sum(int(ni) * f(wi) for ni, wi in zip(counts, w)))
    budget = m_total * cert.good.slack_budget()
    l_of = cert.good.support_value
    # exact intermediate of the chain f(tx) <= f(z) + l(tx - z) + budget
    gap_rhs = f(z) + l_of(tx - z) + budget - fbar(tx)
    return ReduceReport(
        x=x, t=t, z=z, increments=w, counts=counts, m_total=m_total,
        z_bound=z_bound, gap_lhs=float(gap_lhs), gap_rhs=float(gap_rhs),
        step_slack=float(gap_rhs - gap_lhs),
        verified_subadditive=bool(sub_lhs <= sub_rhs + 1e-7),
        verified_good=good_ok)


# ---------------------------------------------------------------------------
# doubling report

@dataclass
class LevelRecord:
    level: int
    radius_lo: float
    radius_hi: float
    sup_gap: float
    sup_normalized: float
    slack: float
    n_samples: int
    certificates_ok: bool


@dataclass
class GapReport:
    doubling: float
    nu: float
    levels: list[LevelRecord] = dc_field(default_factory=list)

    @property
    def constant(self) -> float:
        return max((lv.sup_normalized for lv in self.levels), default=0.0)

    def to_json(self) -> str:
        return json.dumps({
            "doubling": self.doubling,
            "nu": self.nu,
            "constant": self.constant,
            "levels": [{
                "level": lv.level,
                "radius_lo": lv.radius_lo,
                "radius_hi": lv.radius_hi,
                "sup_gap": lv.sup_gap,
                "slack": lv.slack,
                "sup_normalized": lv.sup_normalized,
                "n_samples": lv.n_samples,
                "certificates_ok": lv.certificates_ok,
            } for lv in self.levels],
        })


def _level_samples(d: int, lo: float, hi: float, count: int, rng) -> np.ndarray:
    """Lattice points with |x| in (lo, hi], axis points included."""
    out = []
    for ax in range(d):
        e = np.zeros(d)
        e[ax] = 1.0
        for r in (hi, 0.5 * (lo + hi)):
            out.append(np.rint(r * e))
    while len(out) < count:
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        r = lo + (hi - lo) * rng.random()
        out.append(np.rint(r * u))
    pts = np.unique(np.asarray(out, dtype=np.int64), axis=0)
    norms = np.linalg.norm(pts, axis=1)
    return pts[(norms > lo) & (norms <= hi + 0.5)]


def gap_from_skeleton(oracle: SubadditiveOracle, nu: float, phi: Callable,
                      doubling: float, skeleton_provider: Callable, *,
                      d: int, levels: int = 5, base_radius: float = 4.0,
                      samples: int = 24, seed: int = 0,
                      good_C: float = 2.0, good_K: float = 2.0,
                      certificates_per_level: int = 2,
                      neg_tol: float = 1e-7) -> GapReport:
    """Measure sup(f - fbar) level by level under radius doubling.

    Level k samples lattice points with |x| in (M^k b, M^{k+1} b], records
    the raw sup of the gap, its value normalized by |x|^nu phi(|x|), and the
    increment over the previous level.  A few points per level also exercise
    the skeleton callback through the hull certification step, so the report
    says whether the good-increment machinery holds where it was sampled.
    """
    M = float(doubling)
    if M <= 1:
        raise ValueError("doubling factor must exceed 1")
    rng = np.random.default_rng(seed)
    f, fbar = oracle.f, oracle.fbar
    report = GapReport(doubling=M, nu=nu)
    prev_sup = 0.0
    for k in range(levels):
        lo = base_radius * M**k
        hi = base_radius * M**(k + 1)
        pts = _level_samples(d, lo, hi, samples, rng)
        if len(pts) == 0:
            raise RuntimeError(f"no lattice samples in radius range ({lo}, {hi}]")
        sup_gap = 0.0
        sup_norm = 0.0
        for v in pts:
            gap = f(v) - fbar(v)
            if gap < -neg_tol:
                raise RuntimeError(
                    f"f({tuple(int(c) for c in v)}) fell below its limit by {-gap:.3g}; "
                    "the oracle is not subadditive with this limit")
            r = float(np.linalg.norm(v))
            sup_gap = max(sup_gap, gap)
            sup_norm = max(sup_norm, gap / (r**nu * phi(r)))
        certs_ok = True
        for v in pts[:certificates_per_level]:
            try:
                sk = skeleton_provider(v)
            except Exception as e:
                raise RuntimeError(
                    f"skeleton provider failed at x = {tuple(int(c) for c in v)}") from e
            good = GoodSet(oracle, tuple(float(c) for c in v),
                           C=good_C, K=good_K, nu=nu, phi=phi)
            try:
                alexander_step1(oracle, v, sk, good)
            except ValueError:
                certs_ok = False
        report.levels.append(LevelRecord(
            level=k, radius_lo=lo, radius_hi=hi, sup_gap=float(sup_gap),
            sup_normalized=float(sup_norm), slack=float(sup_gap - prev_sup),
            n_samples=len(pts), certificates_ok=certs_ok))
        prev_sup = sup_gap
    return report
