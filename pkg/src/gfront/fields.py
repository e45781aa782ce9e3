"""Random divergence-free velocity fields with unit range of dependence.

A field is built from i.i.d. bump coefficients on a shifted lattice of pitch
``s``: in 2-d the field is the rotated gradient of a stream function, in 3-d
the curl of a vector potential, so it is divergence-free by construction.
Bumps have compact support of radius ``r``; with 2*(r + s) <= 1 the field
values at points more than distance 1 apart involve disjoint coefficient
sets, hence are independent.

Coefficients are drawn by counter-based hashing (splitmix64) of the lattice
index, so evaluation is a pure function of (spec, seed) and needs no stored
state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import _kernels
from ._kernels import PHASE_STREAM

_TWO53 = 9007199254740992.0
_U64MASK = 0xFFFFFFFFFFFFFFFF

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    # numpy mirror of _kernels.mix64; uint64 wraparound is the point here
    with np.errstate(over="ignore"):
        z = z + _GOLD
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _unit01(seed_u: np.uint64, lane: int) -> float:
    z = _mix64(seed_u ^ np.uint64(lane))
    return float((2.0 * (np.float64(z >> np.uint64(11)) + 0.5) / _TWO53 - 1.0) * 0.5 + 0.5)


def _to_u64(idx: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(idx, dtype=np.int64).view(np.uint64)


def _coef_nd(seed_u: np.uint64, idx_cols: list[np.ndarray], stream: int) -> np.ndarray:
    """Coefficient in (-1, 1) per lattice site; identical chain to the kernels."""
    z = _mix64(seed_u ^ _to_u64(idx_cols[0]))
    for col in idx_cols[1:]:
        z = _mix64(z ^ _to_u64(col))
    z = _mix64(z ^ np.uint64(stream))
    return 2.0 * ((z >> np.uint64(11)).astype(np.float64) + 0.5) / _TWO53 - 1.0


# ---------------------------------------------------------------------------
# profile constants for P(u) = (1 - |u|^2)^4, |u| <= 1

def _profile_maxima() -> tuple[float, float, float]:
    t = np.linspace(0.0, 1.0, 200001)
    w = 1.0 - t * t
    # |grad P| = 8 t w^3
    m1 = float(np.max(8.0 * t * w**3))
    # spectral bound for D2 P = -8 w^3 I + 48 w^2 u u^T
    m2 = float(np.max(np.maximum(8.0 * w**3, np.abs(48.0 * t * t * w**2 - 8.0 * w**3))))
    # crude sup bound for D3 P
    m3 = float(np.max(144.0 * w**2 * t + 192.0 * w * t**3))
    return m1, m2, m3


_M1, _M2, _M3 = _profile_maxima()


@lru_cache(maxsize=None)
def _overlap_count(d: int, r: float, s: float) -> int:
    """Max number of lattice bumps covering a single point, by phase sweep."""
    m = int(math.floor(r / s)) + 1
    ax = np.arange(-m, m + 1)
    grids = np.meshgrid(*([ax * s] * d), indexing="ij")
    centers = np.stack([g.ravel() for g in grids], axis=1)
    n_phase = 41 if d == 2 else 17
    ph_ax = np.linspace(0.0, s, n_phase, endpoint=False)
    ph = np.meshgrid(*([ph_ax] * d), indexing="ij")
    phases = np.stack([g.ravel() for g in ph], axis=1)
    d2 = ((phases[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return int(np.max((d2 < r * r).sum(axis=1)))


@dataclass(frozen=True)
class FieldSpec:
    """Law of the velocity field.

    amplitude is a hard bound on sup |V|; bump_radius and lattice_pitch set
    the microstructure, constrained by 2*(bump_radius + lattice_pitch) <= 1
    so the law has unit range of dependence.
    """

    d: int = 2
    amplitude: float = 1.0
    bump_radius: float = 0.35
    lattice_pitch: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if not self.amplitude >= 0.0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if not 0.0 < self.bump_radius <= 0.5:
            raise ValueError(f"bump_radius must lie in (0, 0.5], got {self.bump_radius}")
        if not 0.0 < self.lattice_pitch <= 0.5:
            raise ValueError(f"lattice_pitch must lie in (0, 0.5], got {self.lattice_pitch}")
        if 2.0 * (self.bump_radius + self.lattice_pitch) > 1.0 + 1e-12:
            raise ValueError(
                "unit range of dependence requires 2*(bump_radius + lattice_pitch) <= 1, "
                f"got {2.0 * (self.bump_radius + self.lattice_pitch):.6g}")
        if not isinstance(self.seed, (int, np.integer)):
            raise ValueError(f"seed must be an integer, got {type(self.seed).__name__}")

    @property
    def speed_bound(self) -> float:
        """Guaranteed bound on sup |V| (the amplitude, by normalisation)."""
        return self.amplitude

    @property
    def lip_bound(self) -> float:
        """Derived C^{1,1} bound: sup|V| + sup|DV| + Lip(DV)."""
        r = self.bump_radius
        geom = 1.0 if self.d == 2 else 2.0 * math.sqrt(3.0)
        per = geom / (math.sqrt(3.0) if self.d == 3 else 1.0)
        # coef_scale * overlap = amplitude / (M1 * sqrt3-if-3d); the overlap
        # count cancels, leaving bounds that depend only on amplitude and r.
        base = self.amplitude / _M1 * per
        return self.amplitude + base * _M2 / r + base * _M3 / (r * r)

    def with_seed(self, seed: int) -> "FieldSpec":
        return replace(self, seed=int(seed))

    def to_text(self) -> str:
        """Plain key = value block, round-trips through from_text."""
        return "".join(
            f"{k} = {v!r}\n"
            for k, v in (
                ("d", self.d),
                ("amplitude", self.amplitude),
                ("bump_radius", self.bump_radius),
                ("lattice_pitch", self.lattice_pitch),
                ("seed", self.seed),
            )
        )

    @classmethod
    def from_text(cls, text: str) -> "FieldSpec":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad spec line: {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        known = {"d", "amplitude", "bump_radius", "lattice_pitch", "seed"}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        out = {}
        for k, v in kv.items():
            out[k] = int(v) if k in ("d", "seed") else float(v)
        return cls(**out)


class Field:
    """A single realisation: spec + effective seed + derived constants."""

    def __init__(self, spec: FieldSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.seed_u = np.uint64(self.seed & _U64MASK)
        self.d = spec.d
        r, s = spec.bump_radius, spec.lattice_pitch
        self.overlap = _overlap_count(spec.d, r, s)
        norm = _M1 * self.overlap * (math.sqrt(3.0) if spec.d == 3 else 1.0)
        self.coef_scale = spec.amplitude / norm
        self.v_max = spec.amplitude
        self.lip = spec.lip_bound
        self.phase = np.array(
            [s * _unit01(self.seed_u, PHASE_STREAM + ax) for ax in range(spec.d)]
        )

    def __repr__(self):
        return f"Field(d={self.d}, amplitude={self.spec.amplitude}, seed={self.seed})"

    # -- evaluation ---------------------------------------------------------

    def eval_many(self, pts: np.ndarray) -> np.ndarray:
        """Velocity at an (N, d) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != self.d:
            raise ValueError(f"expected points of shape (N, {self.d}), got {pts.shape}")
        if self.spec.amplitude == 0.0:
            return np.zeros_like(pts)
        return self._accumulate(pts, want_jacobian=False)

    def eval(self, x: np.ndarray) -> np.ndarray:
        return self.eval_many(np.asarray(x, dtype=np.float64)[None, :])[0]

    def jacobian_many(self, pts: np.ndarray) -> np.ndarray:
        """Velocity Jacobian at an (N, d) array of points; exactly trace-free."""
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != self.d:
            raise ValueError(f"expected points of shape (N, {self.d}), got {pts.shape}")
        if self.spec.amplitude == 0.0:
            return np.zeros((len(pts), self.d, self.d))
        return self._accumulate(pts, want_jacobian=True)

    def eval_jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.jacobian_many(np.asarray(x, dtype=np.float64)[None, :])[0]

    def _accumulate(self, pts, want_jacobian):
        spec = self.spec
        r, s = spec.bump_radius, spec.lattice_pitch
        m = int(math.floor(r / s)) + 1
        base = np.floor((pts - self.phase[None, :]) / s).astype(np.int64)
        if spec.d == 2:
            return self._acc2(pts, base, r, s, m, want_jacobian)
        return self._acc3(pts, base, r, s, m, want_jacobian)

    def _acc2(self, pts, base, r, s, m, want_jacobian):
        ph0, ph1 = self.phase
        x0, x1 = pts[:, 0], pts[:, 1]
        n = len(pts)
        cs = self.coef_scale
        if want_jacobian:
            H = np.zeros((n, 3))  # packed H00, H01, H11 of the stream Hessian
        else:
            a0 = np.zeros(n)
            a1 = np.zeros(n)
        for k0 in range(-m, m + 1):
            u0 = (x0 - (ph0 + s * (base[:, 0] + k0))) / r
            for k1 in range(-m, m + 1):
                u1 = (x1 - (ph1 + s * (base[:, 1] + k1))) / r
                q = u0 * u0 + u1 * u1
                inside = q < 1.0
                if not inside.any():
                    continue
                w = 1.0 - q
                kap = _coef_nd(self.seed_u, [base[:, 0] + k0, base[:, 1] + k1], 0)
                if want_jacobian:
                    w2 = 48.0 * w * w
                    g3 = -8.0 * w * w * w
                    H[:, 0] += np.where(inside, kap * (g3 + w2 * u0 * u0), 0.0)
                    H[:, 1] += np.where(inside, kap * (w2 * u0 * u1), 0.0)
                    H[:, 2] += np.where(inside, kap * (g3 + w2 * u1 * u1), 0.0)
                else:
                    g = -8.0 * w * w * w
                    a0 += np.where(inside, kap * g * u1, 0.0)
                    a1 -= np.where(inside, kap * g * u0, 0.0)
        if want_jacobian:
            out = np.empty((n, 2, 2))
            f = cs / r
            out[:, 0, 0] = f * H[:, 1]
            out[:, 0, 1] = f * H[:, 2]
            out[:, 1, 0] = -f * H[:, 0]
            out[:, 1, 1] = -f * H[:, 1]
            return out
        return np.stack([cs * a0, cs * a1], axis=1)

    def _acc3(self, pts, base, r, s, m, want_jacobian):
        ph0, ph1, ph2 = self.phase
        x0, x1, x2 = pts[:, 0], pts[:, 1], pts[:, 2]
        n = len(pts)
        cs = self.coef_scale
        if want_jacobian:
            # packed symmetric Hessian (00,01,02,11,12,22) per potential stream
            H = np.zeros((n, 3, 6))
        else:
            acc = np.zeros((n, 3))
        cols0 = base[:, 0]
        cols1 = base[:, 1]
        cols2 = base[:, 2]
        for k0 in range(-m, m + 1):
            u0 = (x0 - (ph0 + s * (cols0 + k0))) / r
            for k1 in range(-m, m + 1):
                u1 = (x1 - (ph1 + s * (cols1 + k1))) / r
                for k2 in range(-m, m + 1):
                    u2 = (x2 - (ph2 + s * (cols2 + k2))) / r
                    q = u0 * u0 + u1 * u1 + u2 * u2
                    inside = q < 1.0
                    if not inside.any():
                        continue
                    w = 1.0 - q
                    idx = [cols0 + k0, cols1 + k1, cols2 + k2]
                    c0 = _coef_nd(self.seed_u, idx, 0)
                    c1 = _coef_nd(self.seed_u, idx, 1)
                    c2 = _coef_nd(self.seed_u, idx, 2)
                    if want_jacobian:
                        w2 = 48.0 * w * w
                        g3 = -8.0 * w * w * w
                        packed = (
                            g3 + w2 * u0 * u0,
                            w2 * u0 * u1,
                            w2 * u0 * u2,
                            g3 + w2 * u1 * u1,
                            w2 * u1 * u2,
                            g3 + w2 * u2 * u2,
                        )
                        for mstream, c in enumerate((c0, c1, c2)):
                            for slot, val in enumerate(packed):
                                H[:, mstream, slot] += np.where(inside, c * val, 0.0)
                    else:
                        g = -8.0 * w * w * w
                        acc[:, 0] += np.where(inside, g * (u1 * c2 - u2 * c1), 0.0)
                        acc[:, 1] += np.where(inside, g * (u2 * c0 - u0 * c2), 0.0)
                        acc[:, 2] += np.where(inside, g * (u0 * c1 - u1 * c0), 0.0)
        if want_jacobian:
            # unpack: Hm[i][j], curl rows V0 = d1 A2 - d2 A1, etc.
            def hm(mstream, i, j):
                slot = {(0, 0): 0, (0, 1): 1, (0, 2): 2, (1, 1): 3, (1, 2): 4, (2, 2): 5}[
                    (min(i, j), max(i, j))
                ]
                return H[:, mstream, slot]

            out = np.empty((n, 3, 3))
            f = cs / r
            for j in range(3):
                out[:, 0, j] = f * (hm(2, 1, j) - hm(1, 2, j))
                out[:, 1, j] = f * (hm(0, 2, j) - hm(2, 0, j))
                out[:, 2, j] = f * (hm(1, 0, j) - hm(0, 1, j))
            return out
        return cs * acc

    # -- solver support -----------------------------------------------------

    def sample_grid(self, lo: np.ndarray, step: float, shape: tuple[int, ...],
                    sign: float = 1.0) -> np.ndarray:
        """Compiled velocity samples on a regular grid (sign=-1 negates)."""
        lo = np.asarray(lo, dtype=np.float64)
        out = np.empty(shape + (self.d,))
        if self.spec.amplitude == 0.0:
            out[...] = 0.0
            return out
        r, s = self.spec.bump_radius, self.spec.lattice_pitch
        cs = self.coef_scale * sign
        if self.d == 2:
            _kernels.vel_grid_2d(lo[0], lo[1], step, shape[0], shape[1],
                                 self.seed_u, cs, r, s,
                                 self.phase[0], self.phase[1], out)
        else:
            _kernels.vel_grid_3d(lo[0], lo[1], lo[2], step,
                                 shape[0], shape[1], shape[2],
                                 self.seed_u, cs, r, s,
                                 self.phase[0], self.phase[1], self.phase[2], out)
        return out

    # -- diagnostics --------------------------------------------------------

    def divergence_fd(self, pts: np.ndarray, h: float = 1e-3) -> np.ndarray:
        """Central-difference divergence at sample points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        div = np.zeros(len(pts))
        for ax in range(self.d):
            e = np.zeros(self.d)
            e[ax] = h
            div += (self.eval_many(pts + e)[:, ax] - self.eval_many(pts - e)[:, ax]) / (2.0 * h)
        return div


def build_field(spec: FieldSpec, seed: int | None = None) -> Field:
    """Realise the field for (spec, seed); seed defaults to spec.seed."""
    return Field(spec, spec.seed if seed is None else seed)


def export_grid_csv(field: Field, path, lo, hi, step: float) -> None:
    """Sample the field on a regular grid and write point, velocity rows."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ns = tuple(int(math.floor((hi[ax] - lo[ax]) / step + 1e-9)) + 1 for ax in range(field.d))
    vals = field.sample_grid(lo, step, ns)
    axes = [lo[ax] + step * np.arange(ns[ax]) for ax in range(field.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    flat = vals.reshape(-1, field.d)
    cols = ["x%d" % ax for ax in range(field.d)] + ["v%d" % ax for ax in range(field.d)]
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for p, v in zip(pts, flat):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(c)) for c in v])
