"""Front solver: drift-free geometry, envelopes, quantization, disc, oracle."""

import math

import numpy as np
import pytest

from gfront import (
    Box,
    FieldSpec,
    GridConfig,
    GridConfigError,
    PassageMap,
    WindowError,
    build_field,
    disc_mask,
    disc_points,
    first_passage,
    mask_to_rle,
    oracle_passage,
    passage_to_csv,
    propagate,
    rle_to_mask,
)

STILL = build_field(FieldSpec(d=2, amplitude=0.0, seed=1))


def cfg_for(radius, h=0.25, dt=0.1, **kw):
    return GridConfig(window=Box.centered((0.0,) * 2, radius), h=h, dt=dt, **kw)


# -- drift-free geometry ----------------------------------------------------

def test_zero_drift_passage_is_euclidean_distance():
    cfg = cfg_for(16.0)
    pm = first_passage(STILL, (0.0, 0.0), cfg)
    rng = np.random.default_rng(0)
    for _ in range(60):
        y = rng.uniform(-12, 12, size=2)
        if np.linalg.norm(y) > 12:
            continue
        assert abs(pm.theta_at(y) - np.linalg.norm(y)) <= cfg.h + 2 * cfg.dt


def test_zero_drift_front_is_ball_within_one_cell():
    cfg = cfg_for(8.0)
    fr = propagate(STILL, (0.0, 0.0), 5.0, cfg)
    cen = cfg.centers()
    dist = np.sqrt((cen**2).sum(axis=1))
    for k in (10, 25, 50):
        t = k * cfg.dt
        m = fr.mask(k).ravel()
        assert not np.any(m & (dist > t + cfg.h)), "front leaks past the ball"
        assert np.all(m[dist <= t - cfg.h]), "front misses interior cells"


def test_source_time_is_zero_and_lower_bound_holds():
    f = build_field(FieldSpec(d=2, amplitude=1.0, seed=4))
    cfg = cfg_for(10.0, dt=0.08)
    pm = first_passage(f, (0.2, 0.1), cfg)
    assert pm.theta_at((0.2, 0.1)) == 0.0
    cen = cfg.centers()
    dist = np.sqrt(((cen - pm.source) ** 2).sum(axis=1)).reshape(cfg.shape)
    fin = np.isfinite(pm.t_raw)
    lower = (dist - cfg.h) / (f.v_max + 1.0)
    assert np.all(pm.t_raw[fin] >= lower[fin] - 1e-9)


# -- masks, envelopes, quantization ------------------------------------------

def test_masks_are_monotone_and_respect_envelope():
    f = build_field(FieldSpec(d=2, amplitude=1.0, seed=12))
    cfg = cfg_for(14.0, dt=0.08)
    fr = propagate(f, (0.3, -0.4), 6.0, cfg, rho=1.0)
    prev = None
    for k in range(fr.n_steps + 1):
        m = fr.mask(k)
        if prev is not None:
            assert np.all(m | ~prev), "front must be cumulative"
        assert fr.envelope_violations(k) == 0
        prev = m
    assert fr.cell_count(0) >= 1


def test_growth_is_at_least_quadratic():
    f = build_field(FieldSpec(d=2, amplitude=1.0, seed=30))
    cfg = cfg_for(26.0, dt=0.08)
    fr = propagate(f, (0.0, 0.0), 12.0, cfg)
    beta = 5.0  # conservative for h = 0.25: a drift-free disc gives ~50 t^2
    for t in (5.0, 8.0, 12.0):
        k = int(round(t / cfg.dt))
        assert fr.cell_count(k) >= beta * t * t


def test_quantized_theta_is_grid_of_dt():
    f = build_field(FieldSpec(d=2, amplitude=0.8, seed=2))
    cfg = cfg_for(8.0, dt=0.08)
    pm = first_passage(f, (0.0, 0.0), cfg)
    th = pm.theta[np.isfinite(pm.theta)]
    steps = th / cfg.dt
    assert np.abs(steps - np.round(steps)).max() < 1e-6
    assert np.all(pm.theta >= pm.t_raw - 1e-9)
    assert np.all(pm.theta[np.isfinite(pm.t_raw)] - pm.t_raw[np.isfinite(pm.t_raw)]
                  <= cfg.dt + 1e-9)


def test_guaranteed_dilation_never_slower():
    f = build_field(FieldSpec(d=2, amplitude=1.2, seed=9))
    cfg = cfg_for(12.0, dt=0.07)
    plain = first_passage(f, (0.0, 0.0), cfg)
    dil = first_passage(f, (0.0, 0.0), cfg, rho=0.5)
    both = np.isfinite(plain.theta)
    assert np.all(dil.theta[both] <= plain.theta[both] + 1e-9)
    assert math.isinf(plain.rho) and dil.rho == 0.5


def test_triangle_inequality_through_midpoints():
    f = build_field(FieldSpec(d=2, amplitude=1.0, seed=17))
    cfg = cfg_for(14.0, dt=0.08)
    pm0 = first_passage(f, (0.0, 0.0), cfg)
    rng = np.random.default_rng(1)
    slack = 2 * cfg.h + 4 * cfg.dt
    for _ in range(10):
        y = rng.uniform(-4, 4, size=2)
        z = rng.uniform(-4, 4, size=2)
        pmy = first_passage(f, y, cfg)
        assert pm0.theta_at(z) <= pm0.theta_at(y) + pmy.theta_at(z) + slack


def test_refinement_stability():
    f = build_field(FieldSpec(d=2, amplitude=0.6, seed=23))
    coarse = cfg_for(10.0, h=0.25, dt=0.09)
    fine = cfg_for(10.0, h=0.125, dt=0.045)
    pm_c = first_passage(f, (0.0, 0.0), coarse)
    pm_f = first_passage(f, (0.0, 0.0), fine)
    for ang in np.linspace(0, 2 * math.pi, 12, endpoint=False):
        y = 6.0 * np.array([math.cos(ang), math.sin(ang)])
        diff = abs(pm_c.theta_at(y) - pm_f.theta_at(y))
        assert diff <= 5.0 * (coarse.h + coarse.dt)


def test_three_dimensional_zero_drift():
    f3 = build_field(FieldSpec(d=3, amplitude=0.0, seed=1))
    cfg = GridConfig(window=Box.centered((0.0,) * 3, 4.5), h=0.25, dt=0.1)
    pm = first_passage(f3, (0.0, 0.0, 0.0), cfg)
    for y in ((1.0, 0.0, 0.0), (0.0, -2.0, 1.0), (1.5, 1.5, -1.5)):
        assert abs(pm.theta_at(y) - np.linalg.norm(y)) <= cfg.h + 2 * cfg.dt + 0.06
        # the +0.06 covers the coarser hop stencil used in three dimensions


def test_backward_direction_reverses_drift():
    f = build_field(FieldSpec(d=2, amplitude=1.5, seed=40))
    cfg = cfg_for(10.0, dt=0.05)
    fwd = first_passage(f, (0.0, 0.0), cfg, direction="forward")
    bwd = first_passage(f, (0.0, 0.0), cfg, direction="backward")
    assert not np.allclose(fwd.t_raw, bwd.t_raw)
    # reversing the drift twice is the identity
    bwd2 = first_passage(f, (0.0, 0.0), cfg, direction="backward")
    assert np.array_equal(bwd.t_raw, bwd2.t_raw)


# -- error handling -----------------------------------------------------------

def test_window_too_small_names_required_radius():
    with pytest.raises(WindowError, match="required margin 13"):
        propagate(STILL, (0.0, 0.0), 12.0, cfg_for(8.0))


def test_source_outside_window():
    with pytest.raises(WindowError, match="outside window"):
        first_passage(STILL, (30.0, 0.0), cfg_for(8.0))


def test_cfl_violation_names_bound():
    f = build_field(FieldSpec(d=2, amplitude=2.0, seed=1))
    with pytest.raises(GridConfigError, match="need dt <="):
        first_passage(f, (0.0, 0.0), cfg_for(8.0, h=0.25, dt=0.1))


def test_cell_budget_is_enforced():
    from gfront import BudgetError

    with pytest.raises(BudgetError, match="over the limit"):
        first_passage(STILL, (0.0, 0.0), cfg_for(16.0, max_cells=100))


# -- disc ---------------------------------------------------------------------

def test_disc_of_empty_is_empty():
    assert disc_points(np.zeros((0, 2)), d=2).shape == (0, 2)
    assert disc_mask(np.zeros((4, 4), dtype=bool), lo=(0.0, 0.0), h=0.5).shape == (0, 2)


def test_disc_of_origin_matches_brute_force():
    got = disc_points(np.array([[0.0, 0.0]]), d=2)
    q = 1.0 / math.sqrt(2.0)
    expect = sorted(
        (i * q, j * q)
        for i in range(-3, 4)
        for j in range(-3, 4)
        if math.hypot(i * q, j * q) <= 1.0 + 1e-9
    )
    assert len(got) == 9  # origin, four axis neighbors, four diagonal at radius 1
    assert np.allclose(got, np.array(expect))


def test_disc_of_ball_region_matches_brute_force():
    # occupied cells approximating ball(0, 3)
    h = 0.25
    lo = np.array([-4.0, -4.0])
    n = 32
    cen = lo + (np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"),
                         axis=-1) + 0.5) * h
    mask = (cen**2).sum(axis=-1) <= 9.0
    got = disc_mask(mask, lo, h)
    q = 1.0 / math.sqrt(2.0)
    centers = cen[mask]
    expect = []
    for i in range(-8, 9):
        for j in range(-8, 9):
            z = np.array([i * q, j * q])
            gap = np.maximum(np.abs(z - centers) - h / 2.0, 0.0)
            if np.any((gap**2).sum(axis=1) <= (1.0 + 1e-9) ** 2):
                expect.append((i * q, j * q))
    assert np.allclose(got, np.array(sorted(expect)))
    assert np.all(np.sqrt((got**2).sum(axis=1)) <= 4.0 + 1e-9)


# -- oracle -------------------------------------------------------------------

def test_oracle_agrees_with_solver_on_small_fields():
    cfg = GridConfig(window=Box.centered((0.0, 0.0), 8.0), h=0.1, dt=0.04)
    rng = np.random.default_rng(6)
    for seed in (1, 2):
        f = build_field(FieldSpec(d=2, amplitude=0.3, seed=seed))
        targets = rng.uniform(-3, 3, size=(5, 2))
        pm = first_passage(f, (0.0, 0.0), cfg)
        got = oracle_passage(f, (0.0, 0.0), targets, cfg)
        for k, y in enumerate(targets):
            assert abs(pm.theta_at(y) - got[k]) <= 3 * (cfg.h + cfg.dt)


def test_oracle_richer_controls_never_slower():
    cfg = GridConfig(window=Box.centered((0.0, 0.0), 8.0), h=0.1, dt=0.04)
    f = build_field(FieldSpec(d=2, amplitude=0.3, seed=5))
    targets = np.array([[3.0, 1.0], [-2.5, 2.0], [0.5, -3.5]])
    t8 = oracle_passage(f, (0.0, 0.0), targets, cfg, n_dirs=8)
    t16 = oracle_passage(f, (0.0, 0.0), targets, cfg, n_dirs=16)
    assert np.all(t16 <= t8 + 1e-9)


def test_oracle_node_cap():
    from gfront import BudgetError

    cfg = GridConfig(window=Box.centered((0.0, 0.0), 8.0), h=0.1, dt=0.04)
    f = build_field(FieldSpec(d=2, amplitude=0.3, seed=5))
    with pytest.raises(BudgetError, match="cap"):
        oracle_passage(f, (0.0, 0.0), np.array([[6.0, 6.0]]), cfg, node_cap=50)


# -- external formats ---------------------------------------------------------

def test_rle_round_trip():
    rng = np.random.default_rng(3)
    for shape in ((40, 40), (7, 9), (5, 6, 7)):
        mask = rng.random(shape) < 0.3
        assert np.array_equal(rle_to_mask(mask_to_rle(mask)), mask)
    empty = np.zeros((3, 3), dtype=bool)
    assert np.array_equal(rle_to_mask(mask_to_rle(empty)), empty)
    # encoding is genuinely compact on blocky masks
    blocky = np.zeros((128, 128), dtype=bool)
    blocky[30:90, 40:100] = True
    assert len(mask_to_rle(blocky)) < blocky.size // 8


def test_passage_csv_round_trip(tmp_path):
    f = build_field(FieldSpec(d=2, amplitude=0.5, seed=3))
    cfg = cfg_for(6.0)
    pm = first_passage(f, (0.0, 0.0), cfg)
    path = tmp_path / "passage.csv"
    passage_to_csv(pm, path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "x0,x1,theta,t_raw"
    assert len(rows) == 1 + int(np.isfinite(pm.t_raw).sum())
    vals = rows[1].split(",")
    y = (float(vals[0]), float(vals[1]))
    assert float(vals[2]) == pm.theta_at(y)
