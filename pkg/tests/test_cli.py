from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from twistkam.cli import EXIT_ASSERT, EXIT_INVALID, EXIT_OK, EXIT_SOLVER, main, run_mapping
from twistkam.config import SCHEMA, load_config, validate
from twistkam.errors import InvalidParameters

QUAD1 = {"family": "integrable_quadratic", "M": [[1.0]]}
QUAD2 = {"family": "integrable_quadratic", "M": [[1.0, 0.0], [0.0, 2.0]]}
STD1 = {"family": "standard", "K": 1.0}

# one small configuration per command
SMALL = {
    "audit": (STD1, {"n_samples": 32}),
    "orbit": (STD1, {"x": [0.1], "p": [0.2], "n": 10, "assert_symplectic_below": 1e-8}),
    "conjugate-scan": (QUAD1, {"x_res": 4, "p_lo": -0.5, "p_hi": 0.5, "p_res": 4, "n_max": 5,
                               "assert_degenerate": False}),
    "green": (QUAD1, {"x": [0.0], "p": [0.3], "n_iter": [4, 8]}),
    "minimize": (STD1, {"x": [0.0], "y": [1.0], "N": 3}),
    "f-profile": (STD1, {"N": 1, "r": [0], "grid": 16}),
    "periodic": (QUAD1, {"x": [0.3], "N": 2, "r": [1]}),
    "graph": (QUAD1, {"N": 2, "r": [1], "grid": 8}),
    "alpha": (QUAD1, {"c_grid": [[-0.5], [0.0], [0.5]], "N_max": 2, "R_max": 1}),
    "mane": (QUAD1, {"c": [0.5], "grid": 4, "N_max": 2, "R_max": 1, "n_triples": 5}),
    "aubry": (QUAD1, {"c": [0.5], "grid": 8, "N_max": 2, "R_max": 1}),
    "foliation": (QUAD1, {"x": [0.2], "c_grid": [[0.0], [0.5]], "N_max": 2, "R_max": 1, "assert_monotone": True}),
    "crosscheck": (QUAD1, {"N": 2, "r": [1], "grid": 8, "N_max": 2, "R_max": 1, "assert_match_below": 1e-8}),
}


def cfg(command, genfun=None, seed=0, **params):
    g, p = SMALL.get(command, (QUAD1, {}))
    out = {"genfun": genfun or g, "command": command, "params": {**p, **params}}
    if seed is not None:
        out["seed"] = seed
    return out


def test_every_command_has_a_small_config():
    assert set(SMALL) == set(SCHEMA)


@pytest.mark.parametrize("command", sorted(SMALL))
def test_each_command_runs(tmp_path, command):
    rep = run_mapping(cfg(command), tmp_path)
    assert rep.exit_code == EXIT_OK, rep.error
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["command"]["name"] == command
    assert report["seed"] == 0
    assert report["files"]
    for f in report["files"]:
        assert (tmp_path / f["path"]).exists()
        assert len(f["sha256"]) == 64
    assert all(c["passed"] for c in report["checks"])


def test_periodic_example(tmp_path):
    rep = run_mapping(cfg("periodic"), tmp_path)
    assert rep.summary["p"] == [pytest.approx(0.5, abs=1e-12)]
    assert rep.summary["residual"] <= 1e-12


def test_f_profile_gap_assertions(tmp_path):
    ok = run_mapping(cfg("f-profile", grid=64, assert_gap_above=0.04), tmp_path / "a")
    assert ok.exit_code == EXIT_OK
    assert ok.summary["gap"] == pytest.approx(1 / (2 * np.pi**2), abs=1e-9)
    bad = run_mapping(cfg("f-profile", grid=64, assert_gap_below=1e-6), tmp_path / "b")
    assert bad.exit_code == EXIT_ASSERT
    assert [c.passed for c in bad.checks if c.asserted] == [False]


def test_crosscheck_examples(tmp_path):
    rep = run_mapping(cfg("crosscheck"), tmp_path / "a")
    assert rep.summary["c_bar"] == [pytest.approx(0.5)] and rep.summary["match_sup"] <= 1e-8
    rep2 = run_mapping({"genfun": QUAD2, "command": "crosscheck", "seed": 0,
                        "params": {"N": 1, "r": [0, 1], "grid": 4, "N_max": 1, "R_max": 2,
                                   "assert_match_below": 1e-8}}, tmp_path / "b")
    assert rep2.exit_code == EXIT_OK
    np.testing.assert_allclose(rep2.summary["c_bar"], [0.0, 2.0], atol=1e-12)


def test_crosscheck_coupled_refinement(tmp_path):
    # eps < K / 8 pi^2 keeps (1/2, 1/2) the strict minimizer of the potential, so it is a grid node
    coupled = {"family": "coupled_standard", "K": 0.5, "eps": 0.005}
    base = {"N": 1, "r": [0, 0], "grid": 4, "R_max": 1}
    sups = []
    for n_max in (1, 2):
        rep = run_mapping({"genfun": coupled, "command": "crosscheck", "seed": 0,
                           "params": {**base, "N_max": n_max}}, tmp_path / str(n_max))
        assert rep.exit_code == EXIT_OK, rep.error
        assert rep.summary["allowance"] == 1 / n_max
        sups.append(rep.summary["match_sup"])
    assert sups[1] <= sups[0] + 1e-12
    assert sups[1] <= 1e-8


def test_crosscheck_without_shared_cells_fails_check(tmp_path):
    # a stronger coupling moves the minimizer off every node of a 4 x 4 grid
    rep = run_mapping({"genfun": {"family": "coupled_standard", "K": 0.5, "eps": 0.05}, "command": "crosscheck",
                       "seed": 0, "params": {"N": 1, "r": [0, 0], "grid": 4, "N_max": 1, "R_max": 1}}, tmp_path)
    assert rep.exit_code == EXIT_ASSERT
    assert [c.name for c in rep.checks if not c.passed] == ["shared_cells"]


def test_solver_failure_exit_code(tmp_path):
    rep = run_mapping(cfg("minimize", genfun={"family": "standard", "K": 4.0}, max_iter=1, y=[2.7], N=6),
                      tmp_path)
    assert rep.exit_code == EXIT_SOLVER
    assert "NoConvergence" in rep.error


def test_property_exception_exit_code(tmp_path):
    rep = run_mapping(cfg("graph", genfun=STD1, N=6, r=[2], max_iter=1), tmp_path)
    assert rep.exit_code == EXIT_ASSERT
    assert "GraphRejected" in rep.error


def test_failed_audit_is_invalid(tmp_path):
    bad = {"family": "custom_fourier", "M": [[1.0]], "fourier": [[[0, 1], 0.1, 0.0]]}
    rep = run_mapping(cfg("periodic", genfun=bad), tmp_path)
    assert rep.exit_code == EXIT_INVALID


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(extra=1),
    lambda c: c["params"].update(bogus=1),
    lambda c: c.update(output={"dir": "x", "colour": "red"}),
    lambda c: c.update(output={"format": "xml"}),
    lambda c: c.update(command="plot"),
    lambda c: c["params"].pop("N"),
    lambda c: c["params"].update(N=0),
    lambda c: c["params"].update(assert_residual_below=-1.0),
    lambda c: c.update(seed=-3),
    lambda c: c.pop("genfun"),
])
def test_invalid_configs_rejected(mutate):
    c = cfg("periodic")
    mutate(c)
    with pytest.raises(InvalidParameters):
        validate(c)


def test_seed_mandatory_for_stochastic_commands():
    with pytest.raises(InvalidParameters, match="seed"):
        validate(cfg("f-profile", seed=None))
    validate(cfg("orbit", seed=None))


def test_output_dir_relative_to_config(tmp_path):
    path = tmp_path / "sub" / "exp.yaml"
    path.parent.mkdir()
    path.write_text(yaml.safe_dump({**cfg("periodic"), "output": {"dir": "results"}}))
    assert load_config(path).output_dir == path.parent.resolve() / "results"


def test_main_run_and_check(tmp_path, capsys):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({**cfg("periodic"), "output": {"dir": "out"}}))
    assert main(["check", str(path)]) == EXIT_OK
    assert main(["run", str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "exit\t0" in out
    assert (tmp_path / "out" / "periodic.csv").exists()


def test_main_invalid_config(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("genfun: {family: standard, K: 1}\ncommand: periodic\nunknown: 1\n")
    assert main(["run", str(path)]) == EXIT_INVALID
    assert main(["check", str(tmp_path / "missing.yaml")]) == EXIT_INVALID
    path.write_text("genfun: [unclosed\n")
    assert main(["check", str(path)]) == EXIT_INVALID


def test_csv_and_json_formats(tmp_path):
    run_mapping(cfg("graph"), tmp_path / "csv")
    with open(tmp_path / "csv" / "graph.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x_1", "p_1", "residual", "status"]
    assert len(rows) == 9 and float(rows[1][1]) == pytest.approx(0.5)
    assert rows[1][0] == repr(0.0)
    c = cfg("graph")
    c["output"] = {"format": "json"}
    run_mapping(c, tmp_path / "json")
    data = json.loads((tmp_path / "json" / "graph.json").read_text())
    assert data["header"][0] == "x_1" and len(data["rows"]) == 8


def _hashes(path: Path) -> dict:
    report = json.loads((path / "report.json").read_text())
    return {f["path"]: f["sha256"] for f in report["files"]}


@pytest.mark.parametrize("command", ["f-profile", "mane", "alpha", "conjugate-scan"])
def test_determinism(tmp_path, command):
    run_mapping(cfg(command), tmp_path / "a")
    run_mapping(cfg(command), tmp_path / "b")
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    ra.pop("wall_time"), rb.pop("wall_time")
    assert ra == rb


def test_figures_opt_in(tmp_path):
    rep = run_mapping(cfg("f-profile"), tmp_path / "off")
    assert not list((tmp_path / "off").glob("*.png"))
    c = cfg("f-profile")
    c["output"] = {"figures": True}
    rep = run_mapping(c, tmp_path / "on")
    pngs = list((tmp_path / "on").glob("*.png"))
    assert len(pngs) == 1 and any(f["path"].endswith(".png") for f in rep.files)
    raw = pngs[0].read_bytes()
    assert raw[:8] == b"\x89PNG\r\n\x1a\n"
    assert b"Software" not in raw and b"matplotlib" not in raw
    run_mapping(c, tmp_path / "again")
    assert (tmp_path / "again" / pngs[0].name).read_bytes() == raw
