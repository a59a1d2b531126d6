"""End-to-end command line checks, run in process via main()."""

import csv

import numpy as np
import pytest

from rafem.cli import main
from rafem.mesh import load_mesh
from rafem.results import read_result_file


@pytest.fixture(scope="module")
def mesh_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "box.mesh"
    assert main(["genmesh", "--nx", "3", "--ny", "3", "--nz", "3",
                 "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def result_path(tmp_path_factory, mesh_path):
    path = tmp_path_factory.mktemp("run") / "run.rsf"
    code = main(["simulate", "--mesh", str(mesh_path), "--out", str(path),
                 "--total-time", "1.5", "--dt-init", "0.5"])
    assert code == 0
    return path


class TestGenmesh:
    def test_writes_loadable_mesh(self, tmp_path, capsys):
        out = tmp_path / "m.mesh"
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2",
                     "--out", str(out)]) == 0
        assert "8 nodes" in capsys.readouterr().out
        mesh = load_mesh(out)
        assert mesh.node_count == 8
        assert mesh.tet_count == 6

    def test_node_count_formula(self, tmp_path):
        out = tmp_path / "m.mesh"
        assert main(["genmesh", "--nx", "4", "--ny", "3", "--nz", "2",
                     "--out", str(out)]) == 0
        mesh = load_mesh(out)
        assert mesh.node_count == 4 * 3 * 2
        assert mesh.tet_count == 6 * 3 * 2 * 1

    def test_custom_extent(self, tmp_path):
        out = tmp_path / "m.mesh"
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2",
                     "--extent", "0,1,0,2,0,3", "--out", str(out)]) == 0
        mesh = load_mesh(out)
        assert mesh.nodes.min(axis=0).tolist() == [0.0, 0.0, 0.0]
        assert mesh.nodes.max(axis=0).tolist() == [1.0, 2.0, 3.0]

    def test_missing_flag_is_usage_error(self, capsys):
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_non_integer_dimension_is_usage_error(self):
        assert main(["genmesh", "--nx", "two", "--ny", "2", "--nz", "2",
                     "--out", "m.mesh"]) == 1

    def test_degenerate_dimension_is_input_error(self, tmp_path, capsys):
        out = tmp_path / "m.mesh"
        assert main(["genmesh", "--nx", "1", "--ny", "2", "--nz", "2",
                     "--out", str(out)]) == 2
        assert "input error" in capsys.readouterr().err

    def test_malformed_extent_is_input_error(self, tmp_path):
        out = tmp_path / "m.mesh"
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2",
                     "--extent", "0,1,0,2", "--out", str(out)]) == 2


class TestSimulate:
    def test_summary_lines_and_result_file(self, mesh_path, result_path, capsys):
        result = read_result_file(result_path)
        assert result.node_count == 27
        assert len(result.steps) >= 2
        assert result.steps[-1].time == 1.5

    def test_prints_run_summary(self, mesh_path, tmp_path, capsys):
        out = tmp_path / "r.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out),
                     "--total-time", "0.5"]) == 0
        text = capsys.readouterr().out
        for label in ("mesh nodes: 27", "accepted steps:", "corrector iterations:",
                      "solver iterations:", "dt halvings:", "wall time:"):
            assert label in text

    def test_gmres_backend(self, mesh_path, tmp_path):
        out = tmp_path / "r.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out),
                     "--solver", "gmres", "--tol", "1e-10", "--precondition", "jacobi",
                     "--total-time", "0.5"]) == 0
        assert read_result_file(out).steps

    def test_trace_file_has_ordering_event(self, mesh_path, tmp_path):
        out = tmp_path / "r.rsf"
        trace = tmp_path / "t.csv"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out),
                     "--total-time", "0.5", "--trace", str(trace)]) == 0
        with open(trace) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["region", "step", "corrector_iter", "start_ns", "duration_ns"]
        regions = {row[0] for row in rows[1:]}
        assert {"Assembly", "Solve", "Converge", "Ordering", "IO"} <= regions
        starts = [int(row[3]) for row in rows[1:]]
        assert starts == sorted(starts)

    def test_config_file_applies_and_flags_override(self, mesh_path, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# short smoke run\n"
            "total_time = 1.0\n"
            "dt_init = 0.5\n"
            "solver = qr\n"
        )
        out1 = tmp_path / "a.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out1),
                     "--config", str(cfg)]) == 0
        assert read_result_file(out1).steps[-1].time == 1.0
        out2 = tmp_path / "b.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out2),
                     "--config", str(cfg), "--total-time", "0.5"]) == 0
        assert read_result_file(out2).steps[-1].time == 0.5

    def test_unknown_config_key_is_input_error(self, mesh_path, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_factor = 9\n")
        out = tmp_path / "r.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out),
                     "--config", str(cfg)]) == 2
        assert "warp_factor" in capsys.readouterr().err

    def test_bad_config_value_reports_line(self, mesh_path, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("total_time = 1.0\ndt_init = soon\n")
        out = tmp_path / "r.rsf"
        assert main(["simulate", "--mesh", str(mesh_path), "--out", str(out),
                     "--config", str(cfg)]) == 2
        assert ":2:" in capsys.readouterr().err

    def test_missing_mesh_is_input_error(self, tmp_path):
        assert main(["simulate", "--mesh", str(tmp_path / "nope.mesh"),
                     "--out", str(tmp_path / "r.rsf")]) == 2

    def test_out_of_range_tolerance_is_input_error(self, mesh_path, tmp_path):
        assert main(["simulate", "--mesh", str(mesh_path),
                     "--out", str(tmp_path / "r.rsf"), "--tol", "2.0"]) == 2

    def test_unknown_backend_is_usage_error(self, mesh_path, tmp_path):
        assert main(["simulate", "--mesh", str(mesh_path),
                     "--out", str(tmp_path / "r.rsf"), "--solver", "cholesky"]) == 1

    def test_step_failure_is_numerical_error(self, mesh_path, tmp_path, capsys):
        # one corrector iteration can never absorb the initial voltage jump,
        # and dt starts at the floor, so the controller has nowhere to go
        code = main(["simulate", "--mesh", str(mesh_path),
                     "--out", str(tmp_path / "r.rsf"),
                     "--dt-init", "1e-6", "--dt-min", "1e-6",
                     "--max-corrector-iters", "1", "--total-time", "1.0"])
        assert code == 3
        assert "numerical error" in capsys.readouterr().err


class TestCompare:
    def test_self_compare_is_infinite(self, result_path, tmp_path, capsys):
        out = tmp_path / "psnr.csv"
        assert main(["compare", "--ref", str(result_path), "--test", str(result_path),
                     "--noise-controls", "1e-5,1e-12", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(read_result_file(result_path).steps)
        assert all(row["psnr_T"] == "inf" and row["psnr_V"] == "inf" for row in rows)
        gap = float(rows[0]["control_1e-12_T"]) - float(rows[0]["control_1e-05_T"])
        assert gap == pytest.approx(140.0, abs=1e-9)

    def test_node_count_mismatch_is_input_error(self, result_path, tmp_path):
        other_mesh = tmp_path / "m2.mesh"
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2",
                     "--out", str(other_mesh)]) == 0
        other_run = tmp_path / "r2.rsf"
        assert main(["simulate", "--mesh", str(other_mesh), "--out", str(other_run),
                     "--total-time", "0.5"]) == 0
        assert main(["compare", "--ref", str(result_path), "--test", str(other_run),
                     "--out", str(tmp_path / "p.csv")]) == 2

    def test_plot_flag_writes_figure(self, result_path, tmp_path, capsys):
        out = tmp_path / "psnr.csv"
        assert main(["compare", "--ref", str(result_path), "--test", str(result_path),
                     "--noise-controls", "1e-5", "--out", str(out), "--plot"]) == 0
        figure = tmp_path / "psnr.png"
        assert figure.exists() and figure.stat().st_size > 0
        assert str(figure) in capsys.readouterr().out


class TestSlice:
    def test_writes_grid_csv(self, mesh_path, result_path, tmp_path):
        out = tmp_path / "slice.csv"
        assert main(["slice", "--mesh", str(mesh_path), "--results", str(result_path),
                     "--step", "0", "--plane", "y=0", "--grid", "5x4",
                     "--field", "T", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "z", "value"]
        assert len(rows) == 1 + 5 * 4
        values = [float(r[2]) for r in rows[1:] if r[2] != ""]
        assert values and all(np.isfinite(values))

    def test_diff_of_identical_runs_is_zero(self, mesh_path, result_path, tmp_path):
        out = tmp_path / "d.csv"
        assert main(["slice", "--mesh", str(mesh_path), "--results", str(result_path),
                     "--diff", str(result_path), "--step", "0", "--grid", "4x4",
                     "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][2] == "abs_diff"
        assert all(float(r[2]) == 0.0 for r in rows[1:] if r[2] != "")

    def test_missing_step_is_input_error(self, mesh_path, result_path, tmp_path, capsys):
        assert main(["slice", "--mesh", str(mesh_path), "--results", str(result_path),
                     "--step", "999", "--out", str(tmp_path / "s.csv")]) == 2
        assert "999" in capsys.readouterr().err

    def test_wrong_mesh_is_input_error(self, result_path, tmp_path):
        other = tmp_path / "m2.mesh"
        assert main(["genmesh", "--nx", "2", "--ny", "2", "--nz", "2",
                     "--out", str(other)]) == 0
        assert main(["slice", "--mesh", str(other), "--results", str(result_path),
                     "--step", "0", "--out", str(tmp_path / "s.csv")]) == 2

    def test_malformed_plane_and_grid_are_input_errors(self, mesh_path, result_path, tmp_path):
        base = ["slice", "--mesh", str(mesh_path), "--results", str(result_path),
                "--step", "0", "--out", str(tmp_path / "s.csv")]
        assert main(base + ["--plane", "q=0"]) == 2
        assert main(base + ["--grid", "1x5"]) == 2
        assert main(base + ["--grid", "abc"]) == 2

    def test_plot_flag_writes_figure(self, mesh_path, result_path, tmp_path):
        out = tmp_path / "slice.csv"
        assert main(["slice", "--mesh", str(mesh_path), "--results", str(result_path),
                     "--step", "0", "--grid", "6x6", "--field", "V",
                     "--out", str(out), "--plot"]) == 0
        assert (tmp_path / "slice.png").stat().st_size > 0


class TestBench:
    def test_single_dense_rep_has_unit_speedup(self, mesh_path, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--mesh", str(mesh_path), "--backends", "dense",
                     "--reps", "1", "--total-time", "0.5", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert float(rows[0]["speedup"]) == 1.0
        assert int(rows[0]["makespan_ns"]) > 0

    def test_sweep_emits_row_per_config_and_reports_best_m(self, mesh_path, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--mesh", str(mesh_path), "--backends", "qr,gmres",
                     "--sweep-m", "5,20", "--reps", "2", "--total-time", "0.5",
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "best m:" in text
        with open(out) as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        assert len(rows) == (1 + 2) * 2  # (qr + two gmres m values) x reps
        assert "mean_solve_ns" in reader.fieldnames
        assert "mean_assembly_ns" in reader.fieldnames
        # qr never uses restarts but still reports its configured m
        assert {row["backend"] for row in rows} == {"qr", "gmres"}
        assert all(row["speedup"] == "" for row in rows)  # no dense baseline

    def test_bad_backend_and_reps_are_input_errors(self, mesh_path, tmp_path):
        out = str(tmp_path / "b.csv")
        assert main(["bench", "--mesh", str(mesh_path), "--backends", "magma",
                     "--out", out]) == 2
        assert main(["bench", "--mesh", str(mesh_path), "--reps", "0",
                     "--out", out]) == 2

    def test_plot_flag_writes_figure(self, mesh_path, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--mesh", str(mesh_path), "--backends", "qr",
                     "--total-time", "0.5", "--out", str(out), "--plot"]) == 0
        assert (tmp_path / "bench.png").stat().st_size > 0


class TestTopLevel:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "rafem" in capsys.readouterr().out

    def test_no_subcommand_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_subcommand_is_usage_error(self):
        assert main(["transmogrify"]) == 1
