import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from gfront.subadd import (
    GoodSet,
    SubadditiveOracle,
    alexander_reduce,
    alexander_step1,
    caratheodory,
    check_certificates,
    gap_from_skeleton,
    prefix_deviation,
    rearrange,
)


def norm_plus_sqrt(v):
    r = float(np.linalg.norm(np.asarray(v, dtype=np.float64)))
    return r + math.sqrt(r)


def euclid(v):
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


SQRT_ORACLE = SubadditiveOracle(
    f=norm_plus_sqrt, fbar=euclid,
    support_grad=lambda x: x / np.linalg.norm(x))


def straight_skeleton(x, n=1):
    """Monotone lattice chain from 0 to n*x with increments in {-1,0,1}^d."""
    x = np.asarray(x, dtype=np.float64)
    m = int(np.ceil(np.abs(n * x).max()))
    ks = np.arange(m + 1)[:, None]
    return np.rint(ks * (n * x) / m)


def test_rearrange_identical_vectors():
    v = [(0.3, 0.4)] * 8
    perm = rearrange(v)
    assert sorted(perm.tolist()) == list(range(8))
    assert prefix_deviation(v, (0.3, 0.4), perm) <= 1e-12


def test_rearrange_four_directions_vs_exhaustive():
    v = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
    perm = rearrange(v, x=(0.0, 0.0))
    assert prefix_deviation(v, (0.0, 0.0), perm) <= 4.0 + 1e-9
    best = min(
        prefix_deviation(v, (0.0, 0.0), list(p))
        for p in itertools.permutations(range(4)))
    assert best <= math.sqrt(2.0) + 1e-12


def test_rearrange_random_recentered():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(10, 2))
        raw /= np.maximum(1.0, np.linalg.norm(raw, axis=1, keepdims=True))
        vecs = (raw - raw.mean(axis=0)) / 2.0  # recentred, still in unit ball
        perm, certs = rearrange(vecs, x=(0.0, 0.0), return_certificates=True)
        assert sorted(perm.tolist()) == list(range(10))
        assert prefix_deviation(vecs, (0.0, 0.0), perm) <= 4.0 + 1e-9
        assert check_certificates(vecs, (0.0, 0.0), certs) <= 1e-7


def test_rearrange_certificates_structure():
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(12, 3))
    raw /= np.maximum(1.0, np.linalg.norm(raw, axis=1, keepdims=True)) * 2
    vecs = raw - raw.mean(axis=0)
    perm, certs = rearrange(vecs, x=(0.0, 0.0, 0.0), return_certificates=True)
    # one certificate per recursion level, active sets shrink by one
    sizes = [len(a) for a, _ in certs]
    assert sizes == list(range(12, 2, -1))
    assert prefix_deviation(vecs, np.zeros(3), perm) <= 6.0 + 1e-9


def test_rearrange_exact_fractions():
    half = Fraction(1, 2)
    vecs = [(half, 0), (-half, 0), (0, half), (0, -half),
            (Fraction(1, 4), Fraction(1, 4)),
            (-Fraction(1, 4), -Fraction(1, 4))]
    perm, certs = rearrange(vecs, x=(Fraction(0), Fraction(0)),
                            return_certificates=True)
    assert sorted(perm.tolist()) == list(range(6))
    # exact certificates: equations hold as rational identities
    for active, alpha in certs:
        assert sum(alpha) == max(len(active) - 2, 0)
        for ax in range(2):
            assert sum(a * vecs[i][ax] for a, i in zip(alpha, active)) == 0
    assert prefix_deviation([[float(c) for c in v] for v in vecs],
                            (0.0, 0.0), perm) <= 4.0 + 1e-9


def test_rearrange_input_validation():
    with pytest.raises(ValueError, match="unit ball"):
        rearrange([(2.0, 0.0), (-2.0, 0.0)], x=(0.0, 0.0))
    with pytest.raises(ValueError, match="sum"):
        rearrange([(0.5, 0.0), (0.5, 0.0)], x=(0.0, 0.0))


def test_caratheodory_examples():
    pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    idx, w = caratheodory(pts, (1.0, 0.0))
    assert len(idx) == 1 and idx[0] == 1 and w[0] == 1.0

    idx, w = caratheodory(pts, (0.5, 0.5))
    assert len(idx) <= 3
    assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-12
    rec = np.asarray(pts)[idx].T @ w
    assert np.linalg.norm(rec - (0.5, 0.5)) <= 1e-9

    rng = np.random.default_rng(3)
    cloud = rng.normal(size=(20, 3))
    target = cloud.mean(axis=0)
    idx, w = caratheodory(cloud, target)
    assert len(idx) <= 4
    assert np.linalg.norm(cloud[idx].T @ w - target) <= 1e-9

    with pytest.raises(ValueError, match="outside the convex hull"):
        caratheodory(pts, (2.5, 0.5))


def test_good_set_membership():
    x = (5.0, 0.0)
    good = GoodSet(SQRT_ORACLE, x, C=1.0, K=2.0, nu=0.5)
    assert good.contains((1.0, 0.0))
    assert not good.contains((11.0, 0.0))      # too long
    assert "exceeds K|x|" in good.reasons((11.0, 0.0))[0]
    assert not good.contains((6.0, 0.0))       # overshoots the support value
    assert any("overshoot" in r for r in good.reasons((6.0, 0.0)))
    # moving against the direction is allowed by the support condition
    assert good.support_value((-1.0, 0.0)) < 0


def test_step1_identical_increments():
    x = np.array([2.0, 1.0])
    good = GoodSet(SQRT_ORACLE, tuple(x), C=2.0, K=2.0, nu=0.5)
    sk = np.cumsum(np.vstack([np.zeros(2), np.tile(x, (5, 1))]), axis=0)
    cert = alexander_step1(SQRT_ORACLE, x, sk, good)
    assert cert.alpha == pytest.approx(1.0)
    assert cert.m == 5 and cert.n == pytest.approx(5.0)
    assert cert.support_check <= 1e-9


def test_step1_unit_steps_and_violation():
    M = 5
    x = np.array([float(M), 0.0])
    good = GoodSet(SQRT_ORACLE, tuple(x), C=1.0, K=2.0, nu=0.5)
    n = 2
    sk = straight_skeleton(x, n=n)
    cert = alexander_step1(SQRT_ORACLE, x, sk, good)
    assert cert.m == n * M
    assert cert.alpha == pytest.approx(n / (n * M))

    bad = np.vstack([np.zeros(2), [6.0, 0.0], [10.0, 0.0]])
    with pytest.raises(ValueError, match="increment 0"):
        alexander_step1(SQRT_ORACLE, x, bad, good)


def test_reduce_trivial_single_increment():
    x = np.array([3.0, 4.0])  # |x| = 5, x itself a good increment
    good = GoodSet(SQRT_ORACLE, tuple(x), C=2.0, K=2.0, nu=0.5)
    cert = alexander_step1(SQRT_ORACLE, x, np.vstack([np.zeros(2), x]), good)
    rep = alexander_reduce(SQRT_ORACLE, cert, x, t=1.0)
    assert np.all(rep.z == 0)
    assert rep.m_total == 1
    assert rep.verified_subadditive and rep.verified_good
    assert rep.step_slack >= -1e-9


def test_reduce_long_direction():
    x = np.array([50.0, 0.0])
    good = GoodSet(SQRT_ORACLE, tuple(x), C=1.0, K=2.0, nu=0.5)
    cert = alexander_step1(SQRT_ORACLE, x, straight_skeleton(x, n=1), good)
    rep = alexander_reduce(SQRT_ORACLE, cert, x, t=4.0)
    assert np.linalg.norm(rep.z) <= rep.z_bound + 1e-9
    assert rep.z_bound == pytest.approx(3 * 2.0 * 50.0)
    assert rep.verified_subadditive and rep.verified_good
    assert rep.gap_lhs == pytest.approx(math.sqrt(200.0))
    assert rep.step_slack >= 0.0
    parsed = json.loads(rep.to_json())
    assert parsed["m_total"] == rep.m_total

    with pytest.raises(ValueError, match="stale"):
        alexander_reduce(SQRT_ORACLE, cert, np.array([49.0, 0.0]), t=4.0)
    with pytest.raises(ValueError, match="lattice point"):
        alexander_reduce(SQRT_ORACLE, cert, x, t=0.301)


def test_reduce_linear_functional_zero_gap():
    g = np.array([2.0, 1.0])
    lin = SubadditiveOracle(
        f=lambda v: float(g @ np.asarray(v, dtype=np.float64)),
        fbar=lambda v: float(g @ np.asarray(v, dtype=np.float64)),
        support_grad=lambda x: g)
    x = np.array([4.0, 3.0])
    good = GoodSet(lin, tuple(x), C=1.0, K=2.0, nu=0.5)
    cert = alexander_step1(lin, x, straight_skeleton(x, n=2), good)
    rep = alexander_reduce(lin, cert, x, t=3.0)
    assert rep.gap_lhs == pytest.approx(0.0, abs=1e-9)
    assert float(lin.f(rep.z) - lin.fbar(rep.z)) == pytest.approx(0.0, abs=1e-9)


def test_gap_report_linear_zero_slack():
    g = np.array([1.0, 2.0])
    lin = SubadditiveOracle(
        f=lambda v: float(g @ np.asarray(v, dtype=np.float64)) + 0.0,
        fbar=lambda v: float(g @ np.asarray(v, dtype=np.float64)),
        support_grad=lambda x: g)
    rep = gap_from_skeleton(lin, nu=0.5, phi=lambda r: 1.0, doubling=2.0,
                            skeleton_provider=lambda x: straight_skeleton(x, 1),
                            d=2, levels=4, base_radius=4.0, seed=1)
    assert all(abs(lv.sup_gap) <= 1e-9 for lv in rep.levels)
    assert all(abs(lv.slack) <= 1e-9 for lv in rep.levels)
    assert rep.constant <= 1e-9


def test_gap_report_sqrt_constant_one():
    rep = gap_from_skeleton(SQRT_ORACLE, nu=0.5, phi=lambda r: 1.0,
                            doubling=2.0,
                            skeleton_provider=lambda x: straight_skeleton(x, 1),
                            d=2, levels=5, base_radius=4.0, seed=2,
                            good_C=2.0, good_K=2.0)
    # gap is exactly sqrt(|x|), so every normalized sample sits at 1
    assert rep.constant == pytest.approx(1.0, abs=1e-9)
    for lv in rep.levels:
        assert lv.sup_normalized == pytest.approx(1.0, abs=1e-9)
        assert lv.certificates_ok
    parsed = json.loads(rep.to_json())
    assert len(parsed["levels"]) == 5
    assert {"level", "sup_gap", "slack"} <= set(parsed["levels"][0])


def test_gap_report_log_shrinks():
    log_oracle = SubadditiveOracle(
        f=lambda v: euclid(v) + math.log(2.0 + euclid(v)),
        fbar=euclid,
        support_grad=lambda x: x / np.linalg.norm(x))
    rep = gap_from_skeleton(log_oracle, nu=0.5, phi=lambda r: 1.0,
                            doubling=4.0,
                            skeleton_provider=lambda x: straight_skeleton(x, 1),
                            d=2, levels=4, base_radius=4.0, seed=3)
    norms = [lv.sup_normalized for lv in rep.levels]
    for a, b in zip(norms, norms[1:]):
        assert b <= 0.9 * a


def test_gap_report_detects_bad_limit():
    bad = SubadditiveOracle(f=euclid, fbar=lambda v: euclid(v) + 1.0,
                            support_grad=lambda x: x / np.linalg.norm(x))
    with pytest.raises(RuntimeError, match="below its limit"):
        gap_from_skeleton(bad, nu=0.5, phi=lambda r: 1.0, doubling=2.0,
                          skeleton_provider=lambda x: straight_skeleton(x, 1),
                          d=2, levels=2)


def test_gap_report_provider_failure_names_point():
    def broken(x):
        raise KeyError("nope")

    with pytest.raises(RuntimeError, match=r"skeleton provider failed at x ="):
        gap_from_skeleton(SQRT_ORACLE, nu=0.5, phi=lambda r: 1.0, doubling=2.0,
                          skeleton_provider=broken, d=2, levels=1)
