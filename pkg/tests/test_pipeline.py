import csv
import json

import pytest

import experiment
import pipeline
from config import OUT_ENV, parse_config
from errors import AdmissibilityError, ConfigError, SolverError
from experiment import ROW_COLUMNS, TABLE_COLUMNS, TRACE_COLUMNS, pivot, sweep_cases

SMALL = {
    "schema_version": 1,
    "geometry": {"n": 6, "inclusions": "none"},
    "partition": {"scheme": "grid3x3"},
    "reference": {"overkill": 2},
    "outputs": {"vtk": True},
}

SWEEP = {
    "schema_version": 1,
    "geometry": {"n": 12},
    "materials": {"ratios": [1.0, 1e-2]},
    "partition": {"scheme": "grid3x3", "schemes": ["sequential", "grid3x3"]},
    "reference": {"overkill": 0},
    "outputs": {"trace": False},
}

FAILING = dict(
    SWEEP,
    geometry={"n": 6, "inclusions": "none"},
    materials={"ratios": [1.0]},
    partition={"scheme": "grid3x3", "schemes": ["grid3x3"]},
    recovery={"modes": ["DD optim EET"]},
)


def write_config(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestSingleRun:
    def test_outputs(self, tmp_path):
        out = tmp_path / "out"
        assert pipeline.main(["run", "--config", str(write_config(tmp_path, SMALL)), "--out", str(out)]) == 0

        header, row = read_csv(out / "results.csv")
        assert header == ROW_COLUMNS
        values = dict(zip(header, row))
        assert values["mode"] == "DD optim EET"
        assert values["status"] == "ok"
        assert values["n_subdomains"] == "9"
        assert float(values["effectivity"]) >= 1.0
        assert float(values["separated"]) >= float(values["estimate"])

        trace = read_csv(out / "trace_grid3x3_1.csv")
        assert trace[0] == TRACE_COLUMNS
        assert len(trace) == int(values["iterations"]) + 2
        assert list(out.glob("errmap_*.vtk"))

        summary = json.loads((out / ".last_run.json").read_text(encoding="utf-8"))
        assert summary["all_ok"]
        assert summary["exit_code"] == 0
        used = json.loads((out / "config_used.json").read_text(encoding="utf-8"))
        assert used["geometry"]["n"] == 6

    def test_env_output_dir(self, tmp_path, monkeypatch):
        data = dict(SMALL, reference={"overkill": 0}, outputs={"vtk": False, "trace": False})
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert pipeline.main(["run", "--config", str(write_config(tmp_path, data))]) == 0
        assert (tmp_path / "env" / "results.csv").exists()

    def test_sequential_scheme(self, tmp_path):
        data = dict(SMALL, partition={"scheme": "sequential"}, recovery={"mode": "classical"})
        out = tmp_path / "out"
        assert pipeline.main(["run", "--config", str(write_config(tmp_path, data)), "--out", str(out)]) == 0
        values = dict(zip(*read_csv(out / "results.csv")))
        assert values["mode"] == "EET"
        assert values["algebraic"] == ""
        assert float(values["effectivity"]) >= 1.0

    def test_deterministic(self, tmp_path):
        path = write_config(tmp_path, dict(SMALL, outputs={"vtk": False}))
        for name in ("a", "b"):
            assert pipeline.main(["run", "--config", str(path), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "results.csv").read_text() == (tmp_path / "b" / "results.csv").read_text()


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        data = dict(SMALL, solver={"tolerance": 1e-8})
        code = pipeline.main(["run", "--config", str(write_config(tmp_path, data)), "--out", str(tmp_path)])
        assert code == ConfigError.exit_code == 2

    def test_missing_config(self, tmp_path):
        assert pipeline.main(["run", "--config", str(tmp_path / "absent.json")]) == 2

    def test_solver_failure(self, tmp_path, monkeypatch):
        def fail(*args, **kwargs):
            raise SolverError("coarse problem is singular")

        monkeypatch.setattr(pipeline, "run_single", fail)
        out = tmp_path / "out"
        assert pipeline.main(["run", "--config", str(write_config(tmp_path, SMALL)), "--out", str(out)]) == 3
        summary = json.loads((out / ".last_run.json").read_text(encoding="utf-8"))
        assert not summary["all_ok"]
        assert summary["exit_code"] == 3

    def test_bad_threads(self):
        with pytest.raises(SystemExit):
            pipeline.main(["run", "--preset", "table1", "--threads", "0"])


class TestRunStep:
    def test_stage_is_recorded(self):
        def fail():
            raise SolverError("diverged")

        with pytest.raises(SolverError) as info:
            pipeline.run_step("solve", fail)
        assert info.value.stage == "solve"

    def test_foreign_errors_are_wrapped(self):
        def fail():
            raise KeyError("x")

        with pytest.raises(pipeline.FetiEetError) as info:
            pipeline.run_step("solve", fail)
        assert info.value.exit_code == 1
        assert "KeyError" in str(info.value)

    def test_value_passes_through(self):
        assert pipeline.run_step("add", lambda a, b: a + b, 1, b=2) == 3


class TestSweep:
    def test_cases(self):
        cases = sweep_cases(parse_config(SWEEP))
        assert len(cases) == 8
        assert sum(1 for _, scheme, _ in cases if scheme == "sequential") == 4

    def test_table(self, tmp_path):
        out = tmp_path / "out"
        assert pipeline.main(["run", "--config", str(write_config(tmp_path, SWEEP)), "--out", str(out)]) == 0
        rows = read_csv(out / "results.csv")
        assert len(rows) == 9
        assert all(r[ROW_COLUMNS.index("status")] == "ok" for r in rows[1:])
        table = read_csv(out / "table.csv")
        assert table[0] == TABLE_COLUMNS
        assert len(table) == 3
        assert [r[1] for r in table[1:]] == ["grid3x3", "grid3x3"]
        assert all(r[2:] and all(r[2:]) for r in table[1:])

    def test_failed_recovery_row(self, tmp_path, monkeypatch):
        def fail(*args, **kwargs):
            raise AdmissibilityError("face relations at node 3 cannot carry λ_N")

        monkeypatch.setattr(experiment, "run_substructured", fail)
        result = experiment.run_sweep(parse_config(FAILING), tmp_path)
        (row,) = result.rows
        assert row["status"] == "error:AdmissibilityError"
        assert row["message"] == "face relations at node 3 cannot carry λ_N"
        assert row["n_subdomains"] == 9
        assert int(row["iterations"]) >= 1
        assert None not in row.values()
        _, line = read_csv(tmp_path / "results.csv")
        assert "None" not in line

    def test_failed_solve_row(self, tmp_path, monkeypatch):
        def fail(*args, **kwargs):
            raise SolverError("coarse problem is singular")

        monkeypatch.setattr(experiment, "solve_substructured", fail)
        result = experiment.run_sweep(parse_config(FAILING), tmp_path)
        (row,) = result.rows
        assert row["status"] == "error:SolverError"
        assert row["message"] == "coarse problem is singular"
        assert row["n_subdomains"] == row["iterations"] == ""
        assert len(result.errors) == 1


def test_pivot():
    rows = [
        {"ratio": 1.0, "scheme": "sequential", "mode": "EET", "relative": 0.1, "status": "ok"},
        {"ratio": 1.0, "scheme": "grid3x3", "mode": "DD EET", "relative": 0.2, "status": "ok"},
        {"ratio": 1.0, "scheme": "grid6x6", "mode": "DD EET", "relative": 0.3, "status": "error:SolverError"},
        {"ratio": 1e-3, "scheme": "sequential", "mode": "EETopt", "relative": 0.4, "status": "ok"},
    ]
    table = pivot(rows)
    assert table == [
        {"Ratio": 1.0, "scheme": "grid3x3", "EET": 0.1, "DD EET": 0.2},
        {"Ratio": 1.0, "scheme": "grid6x6", "EET": 0.1},
        {"Ratio": 1e-3, "scheme": "sequential", "EETopt": 0.4},
    ]


@pytest.mark.slow
def test_optimized_recovery_tightens_the_bound(tmp_path):
    data = {
        "schema_version": 1,
        "materials": {"ratios": [1e-4]},
        "partition": {"scheme": "grid6x6", "schemes": ["grid6x6"]},
        "recovery": {"modes": ["DD EET", "DD optim EET"]},
        "reference": {"overkill": 0},
        "outputs": {"trace": False},
    }
    out = tmp_path / "out"
    assert pipeline.main(["run", "--config", str(write_config(tmp_path, data)), "--out", str(out)]) == 0
    header, *rows = read_csv(out / "results.csv")
    relative = {r[header.index("mode")]: float(r[header.index("relative")]) for r in rows}
    assert relative["DD optim EET"] < relative["DD EET"]
