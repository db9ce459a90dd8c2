"""Command-line front end tests: scenarios, artifacts, exit codes."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from boxbridge import Grid, SolverConfig, normalize
from boxbridge.cli import load_scenario, main
from boxbridge.bridge import solve
from boxbridge.kernel1d import ReflectedHeatKernel
from boxbridge.sde import simulate

SMALL = {
    "schema_version": 1,
    "name": "small-1d",
    "domain": {"lower": [-4.0], "upper": [4.0]},
    "theta": 0.5,
    "drift": {"kind": "zero"},
    "rho0_expr": "1 + (x1^2 - 16)^2 * exp(-x1/2)",
    "rho1_expr": "1.2 - cos(pi * (x1 + 4) / 2)",
    "grid": {"points_per_axis": [101]},
    "time_steps": 100,
    "series_terms": 100,
    "fp_tol": 1e-9,
    "fp_max_iter": 200,
    "density_floor": 1e-12,
    "engine": "kernel",
    "n_snapshots": 11,
}

SMALL_2D = {
    "schema_version": 1,
    "name": "small-2d",
    "domain": {"lower": [-4.0, -4.0], "upper": [4.0, 4.0]},
    "theta": 0.5,
    "drift": {"kind": "potential", "expression": "(x1^2 + x2^3) / 5"},
    "rho0_expr": "(1 + (x1^2 - 16)^2 * exp(-x1/2))"
                 " * (1 + (x2^2 - 16)^2 * exp(-x2/2))",
    "rho1_expr": "(1.2 - cos(pi * (x1 + 4) / 2))"
                 " * (1.2 - cos(pi * (x2 + 4) / 2))",
    "grid": {"points_per_axis": [21, 21]},
    "time_steps": 40,
    "series_terms": 100,
    "fp_tol": 1e-9,
    "fp_max_iter": 200,
    "density_floor": 1e-30,
    "engine": "fpk",
    "n_snapshots": 11,
}


def write_scenario(directory, doc):
    path = Path(directory) / f"{doc['name']}.json"
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A scenario file plus completed solve artifacts, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    scenario = write_scenario(root, SMALL)
    out = root / "run"
    assert main(["solve", "--scenario", scenario, "--out", str(out)]) == 0
    return scenario, out


class TestScenarioLoading:

    def test_bundled_scenarios_load(self):
        one = load_scenario("demo-1d")
        assert one.grid.shape == (801,)
        assert one.engine == "kernel"
        assert one.drift.kind == "zero"
        assert abs(one.rho0.mass - 1.0) < 1e-12
        two = load_scenario("demo-2d")
        assert two.grid.shape == (201, 201)
        assert two.engine == "fpk"
        assert two.drift.kind == "gradient"
        assert two.config.density_floor == 1e-30

    def test_unknown_name_is_config_error(self, capsys):
        assert main(["solve", "--scenario", "no-such-scenario"]) == 2
        assert "no-such-scenario" in capsys.readouterr().err

    def test_malformed_expression_names_token(self, tmp_path, capsys):
        doc = dict(SMALL, name="bad-expr", rho1_expr="1 + tan(x1)")
        rc = main(["solve", "--scenario", write_scenario(tmp_path, doc),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "tan" in capsys.readouterr().err

    def test_negative_density_rejected(self, tmp_path, capsys):
        doc = dict(SMALL, name="neg", rho0_expr="x1")
        rc = main(["solve", "--scenario", write_scenario(tmp_path, doc),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "negative" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path):
        doc = dict(SMALL, name="extra", niterations=5)
        assert main(["solve", "--scenario",
                     write_scenario(tmp_path, doc)]) == 2

    def test_wrong_schema_version_rejected(self, tmp_path):
        doc = dict(SMALL, name="v2", schema_version=2)
        assert main(["solve", "--scenario",
                     write_scenario(tmp_path, doc)]) == 2

    def test_kernel_engine_with_potential_rejected(self, tmp_path):
        doc = dict(SMALL, name="kpot",
                   drift={"kind": "potential", "expression": "x1^2"})
        assert main(["solve", "--scenario",
                     write_scenario(tmp_path, doc)]) == 2

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["solve", "--scenario", str(path)]) == 2


class TestSolve:

    def test_artifact_set(self, workspace):
        _, out = workspace
        names = sorted(p.name for p in out.iterdir())
        assert "manifest.json" in names
        assert "residuals.csv" in names
        assert sum(n.startswith("snapshot_") for n in names) == 11

    def test_manifest_contents(self, workspace):
        _, out = workspace
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["format_version"] == 1
        assert doc["command"] == "solve"
        assert doc["scenario"] == {**SMALL,
                                   "outputs": ["snapshots", "residuals"]}
        assert doc["iterations"] >= 1
        assert doc["final_residuals"]["phi1"] < SMALL["fp_tol"]
        assert doc["final_residuals"]["phihat0"] < SMALL["fp_tol"]
        assert doc["wall_time_s"] > 0
        assert len(doc["scenario_sha256"]) == 64

    def test_snapshot_files_recheck_externally(self, workspace):
        _, out = workspace
        doc = json.loads((out / "manifest.json").read_text())
        for entry in doc["snapshot_files"]:
            lines = (out / entry["file"]).read_text().splitlines()
            header = lines[0].split(",")
            data = np.array([[float(v) for v in ln.split(",")]
                             for ln in lines[1:]])
            x = data[:, header.index("x1")]
            rho = data[:, header.index("rho_opt")]
            phi = data[:, header.index("phi")]
            phihat = data[:, header.index("phihat")]
            assert np.max(np.abs(rho - phi * phihat)) <= 1e-12
            mass = np.sum((rho[:-1] + rho[1:]) * np.diff(x)) / 2.0
            assert abs(mass - 1.0) <= 1e-6

    def test_snapshot_floats_roundtrip_bit_exactly(self, workspace):
        scenario, out = workspace
        sc = load_scenario(scenario)
        sol = solve(sc.rho0, sc.rho1, sc.config, sc.make_engine(),
                    n_snapshots=11)
        lines = (out / "snapshot_05.csv").read_text().splitlines()
        header = lines[0].split(",")
        rho_col = header.index("rho_opt")
        parsed = np.array([float(ln.split(",")[rho_col]) for ln in lines[1:]])
        assert np.array_equal(parsed, sol.snapshots[5].rho_opt.values)

    def test_residual_trace_strictly_decreasing(self, workspace):
        _, out = workspace
        lines = (out / "residuals.csv").read_text().splitlines()
        assert lines[0] == "iteration,d_hilbert_phi1,d_hilbert_phihat0"
        data = np.array([[float(v) for v in ln.split(",")]
                         for ln in lines[1:]])
        doc = json.loads((out / "manifest.json").read_text())
        assert data.shape[0] == doc["iterations"]
        assert np.all(np.diff(data[:, 1]) < 0)

    def test_snapshot_count_flag_overrides(self, tmp_path, workspace):
        scenario, _ = workspace
        out = tmp_path / "five"
        assert main(["solve", "--scenario", scenario, "--out", str(out),
                     "--snapshots", "5"]) == 0
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["n_snapshots"] == 5
        assert len(doc["snapshot_files"]) == 5

    def test_no_convergence_exit(self, tmp_path, capsys):
        doc = dict(SMALL, name="stall", fp_max_iter=2)
        rc = main(["solve", "--scenario", write_scenario(tmp_path, doc),
                   "--out", str(tmp_path / "o")])
        assert rc == 3
        assert "convergence" in capsys.readouterr().err

    def test_two_dim_pipeline(self, tmp_path):
        scenario = write_scenario(tmp_path, SMALL_2D)
        out = tmp_path / "run2d"
        assert main(["solve", "--scenario", scenario, "--out",
                     str(out)]) == 0
        assert main(["validate", "--out", str(out)]) == 0
        assert main(["simulate", "--scenario", scenario, "--out", str(out),
                     "--paths", "50", "--seed", "1", "--closed-loop"]) == 0
        assert main(["validate", "--out", str(out)]) == 0
        doc = json.loads((out / "simulate_manifest.json").read_text())
        assert doc["statistics"]["ks_terminal_vs_target"] is None
        assert doc["statistics"]["l1_terminal_vs_target"] is not None


class TestSimulate:

    def test_open_loop_artifacts(self, tmp_path, workspace):
        scenario, _ = workspace
        out = tmp_path / "open"
        assert main(["simulate", "--scenario", scenario, "--out", str(out),
                     "--paths", "300", "--seed", "7"]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"ensemble.csv", "ensemble.json", "terminal_comparison.csv",
                "simulate_manifest.json"} <= names
        doc = json.loads((out / "simulate_manifest.json").read_text())
        assert doc["seed"] == 7 and doc["n_paths"] == 300
        assert doc["closed_loop"] is False
        # open loop cannot land on the bimodal target
        assert doc["statistics"]["l1_terminal_vs_target"] >= 0.1

    def test_reruns_byte_identical(self, tmp_path, workspace):
        scenario, _ = workspace
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["simulate", "--scenario", scenario, "--out",
                         str(out), "--paths", "64", "--seed", "3"]) == 0
        assert (a / "ensemble.csv").read_bytes() \
            == (b / "ensemble.csv").read_bytes()
        assert (a / "terminal_comparison.csv").read_bytes() \
            == (b / "terminal_comparison.csv").read_bytes()

    def test_zero_paths_success(self, tmp_path, workspace):
        scenario, _ = workspace
        out = tmp_path / "empty"
        assert main(["simulate", "--scenario", scenario, "--out", str(out),
                     "--paths", "0"]) == 0
        lines = (out / "ensemble.csv").read_text().splitlines()
        assert len(lines) == 1  # header only
        doc = json.loads((out / "simulate_manifest.json").read_text())
        assert doc["comparison_file"] is None
        assert doc["statistics"]["l1_terminal_vs_target"] is None
        assert main(["validate", "--out", str(out)]) == 0

    def test_closed_loop_needs_solve_artifacts(self, tmp_path, workspace,
                                               capsys):
        scenario, _ = workspace
        rc = main(["simulate", "--scenario", scenario, "--out",
                   str(tmp_path / "fresh"), "--paths", "10",
                   "--closed-loop"])
        assert rc == 5
        assert "solve" in capsys.readouterr().err

    def test_closed_loop_rejects_foreign_artifacts(self, tmp_path, workspace):
        _, out = workspace
        other = dict(SMALL, name="other", theta=0.6)
        scenario = write_scenario(tmp_path, other)
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        rc = main(["simulate", "--scenario", scenario, "--out", str(copy),
                   "--paths", "10", "--closed-loop"])
        assert rc == 5

    def test_closed_loop_matches_library_sampling(self, tmp_path, workspace):
        # the CSV round trip must not change a single sampled state
        scenario, out = workspace
        copy = tmp_path / "cl"
        shutil.copytree(out, copy)
        assert main(["simulate", "--scenario", scenario, "--out", str(copy),
                     "--paths", "50", "--seed", "11", "--closed-loop"]) == 0
        sc = load_scenario(scenario)
        sol = solve(sc.rho0, sc.rho1, sc.config, sc.make_engine(),
                    n_snapshots=11)
        ref = simulate(50, sc.drift, sc.rho0, sc.config, 11,
                       control=sol.as_control_field())
        lines = (copy / "ensemble.csv").read_text().splitlines()
        header = lines[0].split(",")
        data = np.array([[float(v) for v in ln.split(",")]
                         for ln in lines[1:]])
        states = data[:, header.index("x1")].reshape(50, -1)
        assert np.array_equal(states, ref.states[:, :, 0])

    def test_closed_loop_beats_open_loop(self, tmp_path, workspace):
        scenario, out = workspace
        copy = tmp_path / "beat"
        shutil.copytree(out, copy)
        assert main(["simulate", "--scenario", scenario, "--out", str(copy),
                     "--paths", "1000", "--seed", "2", "--closed-loop"]) == 0
        closed = json.loads((copy / "simulate_manifest.json").read_text())
        open_dir = tmp_path / "beat-open"
        assert main(["simulate", "--scenario", scenario, "--out",
                     str(open_dir), "--paths", "1000", "--seed", "2"]) == 0
        opened = json.loads((open_dir / "simulate_manifest.json").read_text())
        assert closed["statistics"]["l1_terminal_vs_target"] \
            < opened["statistics"]["l1_terminal_vs_target"]
        assert closed["statistics"]["ks_terminal_vs_target"] < 0.05


class TestKernelCheck:

    def test_oracle_agreement(self, capsys, tmp_path):
        rc = main(["kernel-check", "--interval", "-1", "1", "--theta", "0.5",
                   "--t", "1", "--terms", "100", "--images", "50",
                   "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "kernel_check.json").read_text())
        assert doc["max_discrepancy_cosine_vs_images"] <= 1e-10
        assert doc["min_kernel_images"] > 0
        assert doc["row_sum_deviation"] <= 1e-8
        assert doc["chapman_kolmogorov_deviation"] <= 1e-6
        assert doc["failures"] == []

    def test_uniform_limit(self, tmp_path):
        rc = main(["kernel-check", "--interval", "-4", "4", "--t", "1000",
                   "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "kernel_check.json").read_text())
        assert doc["min_kernel_images"] == pytest.approx(0.125, abs=1e-9)
        assert doc["max_kernel_images"] == pytest.approx(0.125, abs=1e-9)

    def test_tiny_t_flags_truncation_but_passes(self, capsys):
        rc = main(["kernel-check", "--t", "1e-6"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "truncation_sufficient = False" in out
        assert "insufficient" in out

    def test_too_few_images_fails(self, capsys):
        rc = main(["kernel-check", "--interval", "-1", "1", "--t", "1",
                   "--terms", "100", "--images", "0"])
        assert rc == 4
        assert "FAIL" in capsys.readouterr().out


class TestValidate:

    def test_green_run_validates(self, workspace):
        _, out = workspace
        assert main(["validate", "--out", str(out)]) == 0

    def test_empty_directory_is_missing(self, tmp_path, capsys):
        assert main(["validate", "--out", str(tmp_path)]) == 5
        assert "manifest" in capsys.readouterr().err

    def test_corrupted_snapshot_detected(self, tmp_path, workspace, capsys):
        _, out = workspace
        copy = tmp_path / "bad"
        shutil.copytree(out, copy)
        path = copy / "snapshot_03.csv"
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        row = lines[40].split(",")
        row[header.index("rho_opt")] = repr(float(row[header.index("rho_opt")]) + 1e-9)
        lines[40] = ",".join(row)
        path.write_text("\n".join(lines) + "\n")
        assert main(["validate", "--out", str(copy)]) == 4
        assert "snapshot_03.csv" in capsys.readouterr().out

    def test_tampered_residuals_detected(self, tmp_path, workspace):
        _, out = workspace
        copy = tmp_path / "bad2"
        shutil.copytree(out, copy)
        path = copy / "residuals.csv"
        lines = path.read_text().splitlines()
        first = lines[1].split(",")
        second = lines[2].split(",")
        first[1], second[1] = second[1], first[1]  # break monotonicity
        lines[1], lines[2] = ",".join(first), ",".join(second)
        path.write_text("\n".join(lines) + "\n")
        assert main(["validate", "--out", str(copy)]) == 4
