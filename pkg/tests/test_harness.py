"""Config parsing, validation, batch runs, determinism, and the CLI."""

from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np
import pytest

from gfront import cli
from gfront.harness import (
    ConfigError,
    config_hash,
    list_experiments,
    normalize_config,
    parse_config,
    read_config,
    run_experiment,
)

ALL_KINDS = ("field-check", "percolation-tail", "unicoherence", "detour",
             "rearrange", "shape", "fluctuation", "homog-error", "continuity",
             "skeleton-gap")


def make_config(kind: str, body: str = "", **exp) -> str:
    lines = ["[experiment]", f"kind = {kind}"]
    lines += [f"{k} = {v}" for k, v in exp.items()]
    return "\n".join(lines) + "\n" + body


def issue_fields(report):
    return [i.field for i in report.issues]


# ---------------------------------------------------------------------------
# catalog

def test_catalog_lists_every_kind():
    cat = list_experiments()
    assert set(cat) == set(ALL_KINDS)
    for kind, info in cat.items():
        assert info["description"]
        assert info["default_trials"] >= 1
        for name, p in info["params"].items():
            assert p["type"] in ("int", "float", "ints", "floats")
            assert p["help"]


# ---------------------------------------------------------------------------
# parsing and normalization

def test_parse_minimal_applies_defaults():
    report = parse_config(make_config("rearrange"))
    assert report.ok and not report.issues
    c = report.config
    assert c.kind == "rearrange"
    assert c.name == "rearrange"
    assert c.seed == 0
    assert c.trials == 1000
    assert c.workers == 1
    assert c.field.d == 2 and c.field.amplitude == 1.0
    assert c.h == 0.25 and c.dt is None and c.rho is None
    assert c.params["n_max"] == 12
    assert c.params["dims"] == (2, 3)


def test_normalized_text_is_parse_fixed_point():
    text = make_config("fluctuation", "[field]\namplitude = 0.7\n",
                       seed=42, trials=5)
    report = parse_config(text)
    assert report.ok
    again = parse_config(report.normalized)
    assert again.ok
    assert again.config == report.config
    assert again.normalized == report.normalized
    assert config_hash(again.config) == config_hash(report.config)


def test_hash_tracks_every_field():
    base = parse_config(make_config("rearrange")).config
    other = parse_config(make_config("rearrange", seed=1)).config
    assert config_hash(base) != config_hash(other)
    other = parse_config(make_config("rearrange", "[params]\nn_max = 11\n")).config
    assert config_hash(base) != config_hash(other)


def test_every_kind_parses_with_defaults():
    for kind in ALL_KINDS:
        report = parse_config(make_config(kind))
        assert report.ok, (kind, report.issues)
        norm = parse_config(report.normalized)
        assert norm.ok and norm.config == report.config, kind


def test_resolved_defaults_appear_in_normal_form():
    # derived lists are filled in rather than echoed back as blanks
    report = parse_config(make_config("homog-error"))
    assert report.config.params["t_samples"] == (1.0, 2.0, 3.0, 4.0)
    assert "t_samples" in report.normalized
    report = parse_config(make_config("continuity"))
    amps = report.config.params["amplitudes"]
    assert len(amps) == 4
    assert amps[0] == pytest.approx(2.0) and amps[-1] == pytest.approx(1.125)


# ---------------------------------------------------------------------------
# validation failures, each with a named field

def test_empty_config_names_missing_kind():
    report = parse_config("")
    assert not report.ok
    assert [(i.field, i.reason) for i in report.issues] == [
        ("experiment.kind", "missing experiment kind")]


def test_unknown_kind_lists_choices():
    report = parse_config(make_config("mixing-time"))
    assert not report.ok
    reason = report.issues[0].reason
    for kind in ALL_KINDS:
        assert kind in reason


def test_unknown_section_and_keys_are_named():
    text = make_config("rearrange") + "[solver]\nx = 1\n"
    report = parse_config(text)
    assert "solver" in issue_fields(report)
    report = parse_config(make_config("rearrange", flavor="mint"))
    assert "experiment.flavor" in issue_fields(report)
    report = parse_config(make_config("rearrange", "[params]\np = 0.9\n"))
    assert "params.p" in issue_fields(report)
    report = parse_config(make_config("rearrange", "[field]\nseed = 3\n"))
    assert "field.seed" in issue_fields(report)


def test_bad_scalar_values_are_named():
    report = parse_config(make_config("rearrange", seed=-1, trials=0, workers=0))
    fields = issue_fields(report)
    assert {"experiment.seed", "experiment.trials", "experiment.workers"} <= set(fields)
    report = parse_config(make_config("rearrange", trials="many"))
    assert "experiment.trials" in issue_fields(report)
    report = parse_config(make_config("rearrange", name="bad name"))
    assert "experiment.name" in issue_fields(report)


def test_field_invariants_reported_under_field():
    report = parse_config(make_config("rearrange", "[field]\nd = 4\n"))
    assert not report.ok
    assert issue_fields(report) == ["field"]
    report = parse_config(
        make_config("rearrange", "[field]\nbump_radius = 0.4\nlattice_pitch = 0.2\n"))
    assert issue_fields(report) == ["field"]  # unit range breached


def test_cfl_violation_names_dt_and_required_bound():
    text = make_config("field-check", "[grid]\nh = 0.25\ndt = 0.2\n")
    report = parse_config(text)
    assert not report.ok
    issue = next(i for i in report.issues if i.field == "grid.dt")
    assert "CFL" in issue.reason
    assert repr(0.25 / 3.0) in issue.reason
    # tightening dt below the bound fixes it
    ok = parse_config(make_config("field-check", "[grid]\nh = 0.25\ndt = 0.08\n"))
    assert ok.ok


def test_cfl_for_continuity_uses_largest_law():
    # base amplitude 1 would allow dt = h / 3, but the doubled law must satisfy
    # the bound too
    text = make_config("continuity", "[grid]\nh = 0.4\ndt = 0.13\n")
    report = parse_config(text)
    assert not report.ok
    assert "grid.dt" in issue_fields(report)
    assert parse_config(make_config("continuity", "[grid]\nh = 0.4\ndt = 0.09\n")).ok


def test_grid_token_and_positivity_errors():
    report = parse_config(make_config("rearrange", "[grid]\ndt = soon\n"))
    assert "grid.dt" in issue_fields(report)
    report = parse_config(make_config("rearrange", "[grid]\nrho = -1\n"))
    assert "grid.rho" in issue_fields(report)
    report = parse_config(make_config("rearrange", "[grid]\nh = 0\n"))
    assert "grid.h" in issue_fields(report)


def test_kind_specific_checks():
    report = parse_config(
        make_config("homog-error", "[params]\neps = 0.1, 0.2\n"))
    assert any(f.startswith("params.eps") for f in issue_fields(report))
    report = parse_config(
        make_config("fluctuation", "[params]\ndirection = 1, 0, 0\n"))
    assert not report.ok  # direction length vs field dimension
    report = parse_config(
        make_config("percolation-tail", "[params]\nradius = 3\nset_size = 400\n"))
    assert not report.ok  # block cannot fit in the window


def test_read_config_raises_with_issue_list(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(make_config("rearrange", trials=0))
    with pytest.raises(ConfigError) as exc:
        read_config(path)
    assert ("experiment.trials", "trials must be >= 1") in exc.value.issues
    path.write_text(make_config("rearrange", trials=3))
    assert read_config(path).trials == 3


# ---------------------------------------------------------------------------
# runs: determinism, format, budget

def run_text(text: str, out_dir):
    report = parse_config(text)
    assert report.ok, report.issues
    return run_experiment(report.config, out_dir=out_dir)


def test_rerun_and_worker_count_leave_csv_bytes_unchanged(tmp_path):
    text = make_config("rearrange", seed=7, trials=40, name="rr")
    first = run_text(text, tmp_path / "a")
    again = run_text(text, tmp_path / "b")
    pool = run_text(make_config("rearrange", seed=7, trials=40, name="rr",
                                workers=3), tmp_path / "c")
    blobs = [p.csv_path.read_bytes() for p in (first, again, pool)]
    assert blobs[0] == blobs[1] == blobs[2]
    assert first.summary["csv_sha256"] == pool.summary["csv_sha256"]
    assert first.summary["config_hash"] != pool.summary["config_hash"]  # workers differ


def test_csv_schema_and_summary_contract(tmp_path):
    result = run_text(make_config("rearrange", trials=5, name="fmt"), tmp_path)
    lines = result.csv_path.read_text().splitlines()
    assert lines[0] == "experiment,trial,seed,parameter,value"
    for line in lines[1:]:
        name, trial, seed, param, value = line.split(",")
        assert name == "fmt"
        assert int(trial) >= 0 and int(seed) >= 0
        float(value)  # every value renders as a number
    trials = sorted({int(line.split(",")[1]) for line in lines[1:]})
    assert trials == [0, 1, 2, 3, 4]

    summary = json.loads(result.summary_path.read_text())
    assert summary == result.summary
    assert summary["trials_completed"] == 5 and not summary["partial"]
    assert summary["csv"] == result.csv_path.name
    digest = hashlib.sha256(result.csv_path.read_bytes()).hexdigest()
    assert summary["csv_sha256"] == digest
    assert parse_config(summary["config"]).config == result.config
    assert summary["solver"]["dt_policy"] == "auto"
    assert summary["solver"]["cfl"] <= 1.0


def test_budget_keeps_at_least_one_trial(tmp_path):
    text = make_config("rearrange", trials=100000, budget=0.2, name="cap")
    result = run_text(text, tmp_path)
    assert result.partial
    assert 1 <= len(result.records) < 100000
    assert result.summary["partial"] is True
    assert result.summary["trials_completed"] == len(result.records)
    # the partial CSV is still well formed
    lines = result.csv_path.read_text().splitlines()
    assert lines[0].startswith("experiment,")
    assert len(lines) > 1


def test_run_revalidates_config(tmp_path):
    import dataclasses
    good = parse_config(make_config("rearrange")).config
    bad = dataclasses.replace(good, trials=0)
    with pytest.raises(ConfigError):
        run_experiment(bad, out_dir=tmp_path)


# ---------------------------------------------------------------------------
# per-kind smoke runs, small trial counts

def test_field_check_zero_amplitude_sees_no_motion(tmp_path):
    text = make_config("field-check", trials=3, name="still",
                       body="") + "[field]\namplitude = 0\n"
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert s["ok"] is True
    assert s["max_speed"] == 0.0
    assert s["speed_violations"] == 0
    assert s["max_div_exact"] == 0.0


def test_field_check_random_field_within_tolerances(tmp_path):
    result = run_text(make_config("field-check", trials=4, name="fc"), tmp_path)
    s = result.summary["stats"]
    assert s["ok"] is True
    assert 0.0 < s["max_speed"] <= 1.0
    assert s["max_div_fd"] < 1e-4


def test_percolation_tail_run(tmp_path):
    text = make_config("percolation-tail", trials=400, name="tail",
                       seed=11) + "[params]\nradius = 12\nset_size = 20\n"
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert s["tail_slope"] < 0
    assert s["tail_r2"] > 0.8
    assert s["tail_points"] >= 3
    # at p = 0.95 the closed clusters meeting S are nearly always tiny
    assert 0.0 < s["mean_cl_size"] < 5.0


def test_unicoherence_run(tmp_path):
    result = run_text(make_config("unicoherence", trials=60, name="uni"), tmp_path)
    assert result.summary["stats"]["pass_fraction"] == 1.0


def test_detour_run(tmp_path):
    text = make_config("detour", trials=40, name="det",
                       seed=3) + "[params]\nradius = 10\n"
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert s["pass_fraction"] == 1.0
    assert s["worst_step"] <= math.sqrt(2) + 1e-9


def test_rearrange_run(tmp_path):
    result = run_text(make_config("rearrange", trials=80, name="rr2"), tmp_path)
    s = result.summary["stats"]
    assert s["pass_fraction"] == 1.0
    assert s["worst_deviation"] <= 6 + 1e-9


def test_skeleton_gap_run(tmp_path):
    result = run_text(make_config("skeleton-gap", trials=2, name="gap"), tmp_path)
    s = result.summary["stats"]
    assert s["certificates_ok"] is True
    # f = |v| + sqrt|v| against fbar = |v| normalizes to exactly one
    assert s["constant"] == pytest.approx(1.0, abs=1e-6)


def test_shape_run_zero_field(tmp_path):
    # cheap star estimate, so only closeness to the disc is checked here;
    # monotone decrease needs the full-size estimate and longer times
    text = make_config("shape", trials=2, name="sh", seed=5) + (
        "[field]\namplitude = 0\n"
        "[params]\nts = 8, 16\nest_radii = 4, 8\nest_trials = 2\nrefine = 4\n")
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert len(s["medians"]) == 2
    assert max(s["medians"]) < 0.05
    assert isinstance(s["strictly_decreasing"], bool)


def test_fluctuation_run(tmp_path):
    text = make_config("fluctuation", trials=8, name="fl", seed=2) + (
        "[field]\namplitude = 0.6\n"
        "[params]\nradii = 8, 16, 32\nmargin = 8\n")
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert set(s) >= {"theta_bar_hat", "std_exponent", "bias_exponent",
                      "stds", "means"}
    # toy radii leave real extrapolation error around the unit rate
    assert 0.85 < s["theta_bar_hat"] < 1.3
    # arrivals no faster than full drift assistance allows
    assert all(m > r / 1.7 for m, r in zip(s["means"], (8, 16, 32)))


def test_homog_error_run_zero_field(tmp_path):
    text = make_config("homog-error", trials=2, name="hm", seed=4) + (
        "[field]\namplitude = 0\n"
        "[params]\neps = 0.5, 0.25\nT = 2\nest_radii = 4, 8\nest_trials = 2\n")
    result = run_text(text, tmp_path)
    s = result.summary["stats"]
    assert s["solver_failures"] == 0
    assert len(s["medians"]) == 2
    assert s["medians"][1] < s["medians"][0]


def test_continuity_identical_laws_have_zero_gap(tmp_path):
    text = make_config("continuity", trials=2, name="ct", seed=9) + (
        "[field]\namplitude = 0.5\n"
        "[params]\namplitudes = 0.5, 0.5\nradii = 4, 8\nn_dirs = 8\n"
        "p_dirs = 8\nn_boot = 20\n")
    result = run_text(text, tmp_path)
    diffs = result.summary["stats"]["diffs"]
    assert diffs == [0.0, 0.0]


# ---------------------------------------------------------------------------
# CLI

def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    for kind in ALL_KINDS:
        assert f"{kind}:" in out
    assert "(derived)" in out  # defaults computed at run time are marked


def test_cli_validate_ok_echoes_normal_form(tmp_path, capsys):
    path = write_cfg(tmp_path, make_config("rearrange", trials=9))
    assert cli.main(["validate", path]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok\n\n")
    echoed = out[len("ok\n\n"):]
    report = parse_config(echoed)
    assert report.ok and report.config.trials == 9


def test_cli_validate_bad_config(tmp_path, capsys):
    path = write_cfg(tmp_path, make_config("rearrange", trials=0))
    assert cli.main(["validate", path]) == 1
    err = capsys.readouterr().err
    assert "experiment.trials" in err


def test_cli_validate_unreadable_path(capsys):
    assert cli.main(["validate", "/nonexistent/x.cfg"]) == 1
    assert "cannot read" in capsys.readouterr().err


def test_cli_run_writes_outputs(tmp_path, capsys):
    path = write_cfg(tmp_path, make_config("rearrange", trials=10, name="clirun"))
    assert cli.main(["run", path, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "wrote" in out and "sha256" in out
    assert (tmp_path / "o" / "clirun.csv").exists()
    assert (tmp_path / "o" / "clirun.json").exists()


def test_cli_run_bad_config_exits_one(tmp_path, capsys):
    path = write_cfg(tmp_path, make_config("no-such-kind"))
    assert cli.main(["run", path]) == 1
    assert "experiment.kind" in capsys.readouterr().err


def test_cli_out_flag_beats_environment(tmp_path, capsys, monkeypatch):
    env_dir = tmp_path / "env"
    flag_dir = tmp_path / "flag"
    monkeypatch.setenv("GFRONT_OUT", str(env_dir))
    path = write_cfg(tmp_path, make_config("rearrange", trials=4, name="dest"))
    assert cli.main(["run", path, "--out", str(flag_dir)]) == 0
    capsys.readouterr()
    assert (flag_dir / "dest.csv").exists()
    assert not env_dir.exists()
    # without the flag the environment variable wins
    assert cli.main(["run", path]) == 0
    capsys.readouterr()
    assert (env_dir / "dest.csv").exists()
