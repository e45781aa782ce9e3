"""Compiled kernels: coefficient hashing, velocity sampling, front propagation.

Everything here mirrors plain-numpy reference implementations in the public
modules; the two paths share the exact arithmetic (same hash chain, same
summation order) so results agree bit for bit.  Keep them in sync.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - mirror has numba, but stay runnable
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


_U = np.uint64
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
# sentinel lane id for phase offsets, kept clear of bump streams 0..2
PHASE_STREAM = 101


@njit(cache=True, inline="always")
def mix64(z):
    """splitmix64 finalizer on a uint64."""
    z = z + _GOLD
    z = (z ^ (z >> _U(30))) * _MIX1
    z = (z ^ (z >> _U(27))) * _MIX2
    return z ^ (z >> _U(31))


@njit(cache=True, inline="always")
def coef2(seed, i0, i1, stream):
    """Bump coefficient in (-1, 1) for a 2-d lattice site."""
    z = mix64(_U(seed) ^ _U(i0))
    z = mix64(z ^ _U(i1))
    z = mix64(z ^ _U(stream))
    return 2.0 * (float(z >> _U(11)) + 0.5) / 9007199254740992.0 - 1.0


@njit(cache=True, inline="always")
def coef3(seed, i0, i1, i2, stream):
    z = mix64(_U(seed) ^ _U(i0))
    z = mix64(z ^ _U(i1))
    z = mix64(z ^ _U(i2))
    z = mix64(z ^ _U(stream))
    return 2.0 * (float(z >> _U(11)) + 0.5) / 9007199254740992.0 - 1.0


@njit(cache=True)
def vel_grid_2d(lo0, lo1, step, n0, n1, seed, cs, r, s, ph0, ph1, out):
    """Velocity on a regular grid, d=2.

    cs is the per-bump scale (amplitude / overlap normalisation); the stream
    function is cs*r*sum_c kappa_c P((x-c)/r) with P(u) = (1-|u|^2)^4, and the
    field is its rotated gradient (d2 phi, -d1 phi).  Arithmetic matches the
    vectorised reference in fields.py term for term.
    """
    m = int(math.floor(r / s)) + 1
    for i in range(n0):
        x0 = lo0 + step * i
        b0 = int(math.floor((x0 - ph0) / s))
        for j in range(n1):
            x1 = lo1 + step * j
            b1 = int(math.floor((x1 - ph1) / s))
            a0 = 0.0
            a1 = 0.0
            for k0 in range(-m, m + 1):
                u0 = (x0 - (ph0 + s * (b0 + k0))) / r
                if u0 * u0 >= 1.0:
                    continue
                for k1 in range(-m, m + 1):
                    u1 = (x1 - (ph1 + s * (b1 + k1))) / r
                    q = u0 * u0 + u1 * u1
                    if q < 1.0:
                        w = 1.0 - q
                        g = -8.0 * w * w * w
                        kap = coef2(seed, b0 + k0, b1 + k1, 0)
                        a0 += kap * g * u1
                        a1 -= kap * g * u0
            out[i, j, 0] = cs * a0
            out[i, j, 1] = cs * a1


@njit(cache=True)
def vel_grid_3d(lo0, lo1, lo2, step, n0, n1, n2, seed, cs, r, s, ph0, ph1, ph2, out):
    m = int(math.floor(r / s)) + 1
    for i in range(n0):
        x0 = lo0 + step * i
        b0 = int(math.floor((x0 - ph0) / s))
        for j in range(n1):
            x1 = lo1 + step * j
            b1 = int(math.floor((x1 - ph1) / s))
            for k in range(n2):
                x2 = lo2 + step * k
                b2 = int(math.floor((x2 - ph2) / s))
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                for k0 in range(-m, m + 1):
                    u0 = (x0 - (ph0 + s * (b0 + k0))) / r
                    if u0 * u0 >= 1.0:
                        continue
                    for k1 in range(-m, m + 1):
                        u1 = (x1 - (ph1 + s * (b1 + k1))) / r
                        if u0 * u0 + u1 * u1 >= 1.0:
                            continue
                        for k2 in range(-m, m + 1):
                            u2 = (x2 - (ph2 + s * (b2 + k2))) / r
                            q = u0 * u0 + u1 * u1 + u2 * u2
                            if q < 1.0:
                                w = 1.0 - q
                                g = -8.0 * w * w * w
                                c0_ = coef3(seed, b0 + k0, b1 + k1, b2 + k2, 0)
                                c1_ = coef3(seed, b0 + k0, b1 + k1, b2 + k2, 1)
                                c2_ = coef3(seed, b0 + k0, b1 + k1, b2 + k2, 2)
                                a0 += g * (u1 * c2_ - u2 * c1_)
                                a1 += g * (u2 * c0_ - u0 * c2_)
                                a2 += g * (u0 * c1_ - u1 * c0_)
                out[i, j, k, 0] = cs * a0
                out[i, j, k, 1] = cs * a1
                out[i, j, k, 2] = cs * a2


@njit(cache=True, inline="always")
def hop_time(dd, dv, vv):
    """Least time to realise displacement delta under speed-1 control plus drift v.

    Solves |delta - tau*v| = tau for tau > 0 given dd = |delta|^2, dv = delta.v,
    vv = |v|^2.  Returns inf when the drift makes the move impossible.
    """
    if dd == 0.0:
        return 0.0
    if vv < 1.0 - 1e-12:
        return (dv + math.sqrt(dv * dv + (1.0 - vv) * dd)) / (1.0 - vv)
    if vv <= 1.0 + 1e-12:
        if dv > 1e-300:
            return dd / (2.0 * dv)
        return np.inf
    if dv <= 0.0:
        return np.inf
    disc = dv * dv - (vv - 1.0) * dd
    if disc < 0.0:
        return np.inf
    return (dv - math.sqrt(disc)) / (vv - 1.0)


@njit(cache=True, inline="always")
def _heap_push(ht, hk, hn, t, key):
    cap = ht.shape[0]
    if hn >= cap:
        t2 = np.empty(cap * 2, np.float64)
        k2 = np.empty(cap * 2, np.int64)
        t2[:hn] = ht
        k2[:hn] = hk
        ht = t2
        hk = k2
    ht[hn] = t
    hk[hn] = key
    c = hn
    while c > 0:
        p = (c - 1) // 2
        if ht[p] > ht[c]:
            ht[p], ht[c] = ht[c], ht[p]
            hk[p], hk[c] = hk[c], hk[p]
            c = p
        else:
            break
    return ht, hk, hn + 1


@njit(cache=True, inline="always")
def _heap_pop(ht, hk, hn):
    t = ht[0]
    key = hk[0]
    hn -= 1
    ht[0] = ht[hn]
    hk[0] = hk[hn]
    c = 0
    while True:
        l = 2 * c + 1
        m = c
        if l < hn and ht[l] < ht[m]:
            m = l
        if l + 1 < hn and ht[l + 1] < ht[m]:
            m = l + 1
        if m == c:
            break
        ht[m], ht[c] = ht[c], ht[m]
        hk[m], hk[c] = hk[c], hk[m]
        c = m
    return t, key, hn


@njit(cache=True)
def dijkstra_2d(vh, h, n0, n1, ed0, ed1,
                seed_idx, seed_t,
                rho, dl0, dl1,
                t_cap, tmask, n_stop,
                T, par):
    """Earliest-arrival flood over grid cells, d=2.

    vh holds the drift on the half-step grid (2*n0-1, 2*n1-1, 2) so each hop
    (i,j)->(i+e0,j+e1) reads the drift at the hop midpoint (2i+e0, 2j+e1).
    Hop cost comes from hop_time; every rho units a unit-ball dilation (offsets
    dl*, arrival rounded up to the next multiple of rho) fires as an extra set
    of edges.  T and par are flat over n0*n1; par >= 0 is a hop predecessor,
    par <= -2 encodes a dilation predecessor -(p+2), par == -1 is unreached.
    Stops early once n_stop masked targets are settled or t_cap is passed.
    """
    ne = ed0.shape[0]
    nd = dl0.shape[0]
    cap0 = 4 * (n0 * n1) + 64
    ht = np.empty(cap0, np.float64)
    hk = np.empty(cap0, np.int64)
    hn = 0
    done = np.zeros(n0 * n1, np.uint8)
    for si in range(seed_idx.shape[0]):
        u = seed_idx[si]
        if seed_t[si] < T[u]:
            T[u] = seed_t[si]
            ht, hk, hn = _heap_push(ht, hk, hn, seed_t[si], u)
    remaining = n_stop
    while hn > 0:
        t, u, hn = _heap_pop(ht, hk, hn)
        if done[u]:
            continue
        done[u] = 1
        if t > t_cap:
            break
        if n_stop > 0 and tmask[u] != 0:
            remaining -= 1
            if remaining <= 0:
                break
        i = u // n1
        j = u - i * n1
        for e in range(ne):
            i2 = i + ed0[e]
            j2 = j + ed1[e]
            if i2 < 0 or i2 >= n0 or j2 < 0 or j2 >= n1:
                continue
            u2 = i2 * n1 + j2
            if done[u2]:
                continue
            vx = vh[i + i2, j + j2, 0]
            vy = vh[i + i2, j + j2, 1]
            dx = ed0[e] * h
            dy = ed1[e] * h
            tau = hop_time(dx * dx + dy * dy, dx * vx + dy * vy, vx * vx + vy * vy)
            nt = t + tau
            if nt < T[u2]:
                T[u2] = nt
                par[u2] = u
                ht, hk, hn = _heap_push(ht, hk, hn, nt, u2)
        if rho > 0.0 and nd > 0:
            # ball added at the end of each rho interval: strictly later multiple
            nt = (math.floor(t / rho + 1e-9) + 1.0) * rho
            if nt <= t_cap:
                for e in range(nd):
                    i2 = i + dl0[e]
                    j2 = j + dl1[e]
                    if i2 < 0 or i2 >= n0 or j2 < 0 or j2 >= n1:
                        continue
                    u2 = i2 * n1 + j2
                    if done[u2] == 0 and nt < T[u2]:
                        T[u2] = nt
                        par[u2] = -(u + 2)
                        ht, hk, hn = _heap_push(ht, hk, hn, nt, u2)
    return 0


@njit(cache=True)
def dijkstra_3d(vh, h, n0, n1, n2, ed0, ed1, ed2,
                seed_idx, seed_t,
                rho, dl0, dl1, dl2,
                t_cap, tmask, n_stop,
                T, par):
    ne = ed0.shape[0]
    nd = dl0.shape[0]
    n12 = n1 * n2
    cap0 = 4 * (n0 * n12) + 64
    ht = np.empty(cap0, np.float64)
    hk = np.empty(cap0, np.int64)
    hn = 0
    done = np.zeros(n0 * n12, np.uint8)
    for si in range(seed_idx.shape[0]):
        u = seed_idx[si]
        if seed_t[si] < T[u]:
            T[u] = seed_t[si]
            ht, hk, hn = _heap_push(ht, hk, hn, seed_t[si], u)
    remaining = n_stop
    while hn > 0:
        t, u, hn = _heap_pop(ht, hk, hn)
        if done[u]:
            continue
        done[u] = 1
        if t > t_cap:
            break
        if n_stop > 0 and tmask[u] != 0:
            remaining -= 1
            if remaining <= 0:
                break
        i = u // n12
        rem = u - i * n12
        j = rem // n2
        k = rem - j * n2
        for e in range(ne):
            i2 = i + ed0[e]
            j2 = j + ed1[e]
            k2 = k + ed2[e]
            if i2 < 0 or i2 >= n0 or j2 < 0 or j2 >= n1 or k2 < 0 or k2 >= n2:
                continue
            u2 = (i2 * n1 + j2) * n2 + k2
            if done[u2]:
                continue
            vx = vh[i + i2, j + j2, k + k2, 0]
            vy = vh[i + i2, j + j2, k + k2, 1]
            vz = vh[i + i2, j + j2, k + k2, 2]
            dx = ed0[e] * h
            dy = ed1[e] * h
            dz = ed2[e] * h
            tau = hop_time(dx * dx + dy * dy + dz * dz,
                           dx * vx + dy * vy + dz * vz,
                           vx * vx + vy * vy + vz * vz)
            nt = t + tau
            if nt < T[u2]:
                T[u2] = nt
                par[u2] = u
                ht, hk, hn = _heap_push(ht, hk, hn, nt, u2)
        if rho > 0.0 and nd > 0:
            nt = (math.floor(t / rho + 1e-9) + 1.0) * rho
            if nt <= t_cap:
                for e in range(nd):
                    i2 = i + dl0[e]
                    j2 = j + dl1[e]
                    k2 = k + dl2[e]
                    if i2 < 0 or i2 >= n0 or j2 < 0 or j2 >= n1 or k2 < 0 or k2 >= n2:
                        continue
                    u2 = (i2 * n1 + j2) * n2 + k2
                    if done[u2] == 0 and nt < T[u2]:
                        T[u2] = nt
                        par[u2] = -(u + 2)
                        ht, hk, hn = _heap_push(ht, hk, hn, nt, u2)
    return 0


def warmup(d: int = 2) -> None:
    """Force-compile the kernels for one dimension (used before timed runs)."""
    seed = np.uint64(1)
    if d == 2:
        vg = np.zeros((3, 3, 2))
        vel_grid_2d(0.0, 0.0, 0.5, 3, 3, seed, 1.0, 0.35, 0.15, 0.0, 0.0, vg)
        vh = np.zeros((5, 5, 2))
        T = np.full(9, np.inf)
        par = np.full(9, -1, np.int64)
        dijkstra_2d(vh, 1.0, 3, 3,
                    np.array([1, -1], np.int64), np.array([0, 0], np.int64),
                    np.array([4], np.int64), np.array([0.0]),
                    0.0, np.empty(0, np.int64), np.empty(0, np.int64),
                    np.inf, np.zeros(9, np.uint8), 0, T, par)
    else:
        vg = np.zeros((2, 2, 2, 3))
        vel_grid_3d(0.0, 0.0, 0.0, 0.5, 2, 2, 2, seed, 1.0, 0.35, 0.15, 0.0, 0.0, 0.0, vg)
        vh = np.zeros((3, 3, 3, 3))
        T = np.full(8, np.inf)
        par = np.full(8, -1, np.int64)
        dijkstra_3d(vh, 1.0, 2, 2, 2,
                    np.array([1], np.int64), np.array([0], np.int64), np.array([0], np.int64),
                    np.array([0], np.int64), np.array([0.0]),
                    0.0, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64),
                    np.inf, np.zeros(8, np.uint8), 0, T, par)
