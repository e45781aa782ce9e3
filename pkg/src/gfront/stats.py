"""Fitting and resampling helpers shared by the experiment modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import mix64 as _mix64_jit

_MASK63 = (1 << 63) - 1


def derive_seeds(master: int, n: int) -> list[int]:
    """Per-trial seeds from one master seed, stable across platforms.

    Each seed is a 64-bit mix of (master, index), truncated to 63 bits so it
    stays a valid field seed.  Trial i always gets the same seed for a given
    master, independent of execution order or worker count.
    """
    with np.errstate(over="ignore"):
        base = _mix64_jit(np.uint64(master & 0xFFFFFFFFFFFFFFFF))
        out = []
        for i in range(n):
            z = _mix64_jit(base ^ np.uint64(i))
            out.append(int(z) & _MASK63)
    return out


@dataclass
class LineFit:
    slope: float
    intercept: float
    r2: float
    n: int


def line_fit(x, y) -> LineFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two points to fit a line")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return LineFit(float(slope), float(intercept), float(r2), len(x))


@dataclass
class PowerFit:
    exponent: float
    amplitude: float
    r2: float
    n: int


def loglog_fit(x, y) -> PowerFit:
    """Fit y = amplitude * x^exponent by least squares in log-log space."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive points for a power fit")
    lf = line_fit(np.log(x[keep]), np.log(y[keep]))
    return PowerFit(lf.slope, float(np.exp(lf.intercept)), lf.r2, lf.n)


@dataclass
class TailFit:
    slope: float
    intercept: float
    r2: float
    deltas: np.ndarray
    log_tail: np.ndarray
    n_events: np.ndarray


def tail_fit(values, base: float, min_events: int = 10) -> TailFit:
    """Fit log P[X > base + delta] against delta on integer offsets.

    Only offsets with at least min_events exceedances and a nontrivial
    probability enter the fit, so the line is supported by real mass rather
    than one or two stragglers.
    """
    vals = np.asarray(values, dtype=np.float64)
    n = len(vals)
    if n == 0:
        raise ValueError("no samples")
    lo = int(np.floor(vals.min() - base))
    hi = int(np.ceil(vals.max() - base))
    deltas, logs, events = [], [], []
    for delta in range(lo, hi + 1):
        count = int((vals > base + delta).sum())
        if count >= min_events and count < n:
            deltas.append(float(delta))
            logs.append(np.log(count / n))
            events.append(count)
    if len(deltas) < 2:
        raise ValueError(
            f"tail too thin: only {len(deltas)} usable offsets with >= {min_events} events")
    lf = line_fit(deltas, logs)
    return TailFit(lf.slope, lf.intercept, lf.r2,
                   np.asarray(deltas), np.asarray(logs), np.asarray(events))


def bootstrap_se(samples, stat=None, n_boot: int = 300, seed: int = 0) -> float:
    """Bootstrap standard error of a statistic over rows of samples.

    samples may be 1d (plain values) or 2d (paired rows resampled together,
    which keeps common-random-number correlation intact).  stat receives the
    resampled array and defaults to the mean of the first column.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if stat is None:
        stat = lambda s: float(s[:, 0].mean())
    rng = np.random.default_rng(seed)
    n = arr.shape[0]
    vals = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        vals[b] = stat(arr[idx])
    return float(vals.std(ddof=1))


def fekete_violation(means, ses) -> float:
    """Worst increase of a supposedly non-increasing sequence, in SE units.

    Returns 0 when the sequence never rises; otherwise the largest rise
    divided by the combined standard error of the two entries involved.
    """
    means = np.asarray(means, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    worst = 0.0
    for i in range(len(means) - 1):
        rise = means[i + 1] - means[i]
        if rise > 0:
            se = float(np.hypot(ses[i], ses[i + 1]))
            worst = max(worst, rise / se if se > 0 else np.inf)
    return worst
