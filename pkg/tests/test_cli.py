import csv
import json
import math

import pytest

from bobkovlab.cli import EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, THREADS_ENV, main

small_grid = ["--t-range", "-1", "1", "3", "--p-range", "-1", "1", "3"]


def read_csv(path):
    lines = path.read_text().splitlines()
    comments = [line for line in lines if line.startswith("#")]
    rows = list(csv.reader(line for line in lines if not line.startswith("#")))
    return comments, rows[0], rows[1:]


def run_json(tmp_path, *argv):
    path = tmp_path / "report.json"
    code = main(["-o", str(path), *argv])
    return code, json.loads(path.read_text())


def test_hjb_sweep(tmp_path):
    path = tmp_path / "hjb.csv"
    assert main(["-o", str(path), "hjb-sweep", *small_grid]) == EXIT_OK
    comments, header, rows = read_csv(path)
    assert comments[0].startswith("# generated ")
    assert header == [
        "t", "p", "lambda", "a", "M", "residual", "rel_residual", "tol", "status"
    ]
    assert len(rows) == 3 * 3 * 5
    assert all(row[-1] == "ok" for row in rows)
    assert [float(row[0]) for row in rows[::15]] == [-1, 0, 1]


def test_hjb_sweep_relative_residual(tmp_path):
    # Residuals are relative to pdf(t) pdf(p).
    path = tmp_path / "hjb.csv"
    assert main(["-o", str(path), "hjb-sweep", *small_grid]) == EXIT_OK
    _, header, rows = read_csv(path)
    for row in rows:
        row = dict(zip(header, row, strict=True))
        t, p = float(row["t"]), float(row["p"])
        scale = math.exp(-(t**2 + p**2) / 2) / (2 * math.pi)
        expected = abs(float(row["residual"])) / scale
        assert float(row["rel_residual"]) == pytest.approx(expected, rel=1e-12)


def test_hjb_sweep_tolerance_exceeded(tmp_path):
    path = tmp_path / "hjb.csv"
    argv = ["-o", str(path), "hjb-sweep", *small_grid, "--tol", "-1"]
    assert main(argv) == EXIT_TOLERANCE
    _, _, rows = read_csv(path)
    assert all(row[-1] == "tolerance_exceeded" for row in rows)


def test_derivative_check(tmp_path):
    path = tmp_path / "derivatives.csv"
    argv = ["-o", str(path), "derivative-check", *small_grid, "--lambdas", "0.3", "0.6"]
    assert main(argv) == EXIT_OK
    _, header, rows = read_csv(path)
    assert header[:3] == ["t", "p", "lambda"]
    assert all(name.startswith("err_") for name in header[3:-2])
    assert len(rows) == 3 * 3 * 2


def test_bobkov_check_non_optimizer(tmp_path):
    code, report = run_json(tmp_path, "bobkov-check", "--function", "probit-poly:-1,0,1")
    assert code == EXIT_OK
    assert list(report) == sorted(report)
    assert report["command"] == "bobkov-check"
    assert report["status"] == "ok"
    assert report["outputs"]["deficit"] > 1e-3
    assert report["outputs"]["equality"] is False
    assert report["tolerances"]["deficit"] == 1e-9


def test_bobkov_check_optimizer(tmp_path):
    code, report = run_json(tmp_path, "bobkov-check", "--function", "probit-poly:-0.2,0.7")
    assert code == EXIT_OK
    assert abs(report["outputs"]["deficit"]) <= 1e-8
    assert report["outputs"]["equality"] is True


def test_bobkov_check_corpus_deterministic(tmp_path, monkeypatch):
    outputs = []
    for threads in ("1", "3"):
        monkeypatch.setenv(THREADS_ENV, threads)
        path = tmp_path / f"corpus-{threads}.csv"
        argv = ["-o", str(path), "--seed", "7", "bobkov-check", "--corpus", "3"]
        assert main(argv) == EXIT_OK
        outputs.append(path.read_text().splitlines())

    # Identical apart from the timestamp.
    assert outputs[0][1:] == outputs[1][1:]
    assert outputs[0][1] == "# seed 7"
    identifiers = [line.split(",")[0] for line in outputs[0][3:]]
    assert identifiers == sorted(identifiers)
    assert len(identifiers) == 3


def test_bobkov_check_corpus_all_families(tmp_path):
    path = tmp_path / "corpus.csv"
    argv = ["-o", str(path), "--seed", "42", "bobkov-check", "--corpus", "5"]
    assert main(argv) == EXIT_OK
    _, header, rows = read_csv(path)
    rows = [dict(zip(header, row, strict=True)) for row in rows]
    assert header[-2:] == ["agreement", "status"]
    assert [row["id"] for row in rows] == [
        "affine-000", "blend-003", "constant-001", "curved-002", "tabulated-004"
    ]
    assert all(row["agreement"] == "true" for row in rows)
    assert all(row["status"] == "ok" for row in rows)
    equality = {row["id"]: row["equality"] for row in rows}
    assert equality["affine-000"] == "true"
    assert equality["blend-003"] == "false"
    assert equality["tabulated-004"] == "false"


def test_bobkov_check_blend(tmp_path):
    code, report = run_json(
        tmp_path, "bobkov-check", "--function", "blend:0.4,-0.3,0.1;0.6,0.2,-0.4"
    )
    assert code == EXIT_OK
    assert report["outputs"]["equality"] is False
    assert report["outputs"]["agreement"] is True
    assert report["outputs"]["deficit"] > 1e-8
    assert report["tolerances"]["equality_deficit"] == 1e-8


def test_solve_slope(tmp_path):
    path = tmp_path / "slope.csv"
    argv = ["-o", str(path), "solve-slope", "--t", "0.5", "--p", "-0.3", "--lambda", "0.5"]
    assert main(argv) == EXIT_OK
    _, header, rows = read_csv(path)
    row = dict(zip(header, rows[0], strict=True))
    assert row["status"] == "ok"
    assert row["ill_conditioned"] == "false"
    assert abs(float(row["residual"])) <= 1e-12


def test_certify_small_grid(tmp_path):
    code, report = run_json(
        tmp_path, "certify", "--t", "0.5", "--x", "0.6", "--lambda", "0.5", "--n", "8"
    )
    assert code == EXIT_TOLERANCE
    assert report["status"] == "error"
    assert report["outputs"]["certified"] is False


def test_certify_help_documents_minimum_grid(capsys):
    assert main(["certify", "--help"]) == EXIT_OK
    assert "at least 64" in " ".join(capsys.readouterr().out.split())


def test_certify_offset(tmp_path):
    code, report = run_json(
        tmp_path,
        "certify",
        *("--t", "0.5", "--x", "0.6", "--lambda", "0.5", "--n", "128"),
        *("--bellman-offset", "0.1"),
    )
    assert code == EXIT_TOLERANCE
    assert report["status"] == "tolerance_exceeded"
    assert report["outputs"]["certified"] is False
    assert report["inputs"]["n"] == 128


def test_limits(tmp_path):
    code, report = run_json(tmp_path, "limits", "--function", "probit-poly:-0.2,0.7")
    assert code == EXIT_OK
    assert report["outputs"]["low_end"] <= 1e-5
    assert report["outputs"]["high_end_gap"] <= 1e-5


def test_tensor_check(tmp_path):
    code, report = run_json(
        tmp_path, "tensor-check", "--function", "probit-affine:0.6,0.8,-0.1"
    )
    assert code == EXIT_OK
    assert report["outputs"]["total_deficit"] <= 1e-6

    path = tmp_path / "tensor.csv"
    assert main(["-o", str(path), "tensor-check", "--corpus", "2"]) == EXIT_OK
    comments, header, rows = read_csv(path)
    assert comments[1] == "# seed 42"
    assert header[0] == "id"
    assert len(rows) == 2


usage_error_cases = [
    [],
    ["hjb-sweep", "--t-range", "1", "-1", "3"],
    ["hjb-sweep", "--lambdas", "1.5"],
    ["bobkov-check"],
    ["bobkov-check", "--function", "spline:1,2"],
    ["bobkov-check", "--corpus", "0"],
    ["solve-slope", "--t", "0", "--p", "0", "--lambda", "1"],
    ["certify", "--t", "0.5", "--x", "0.6", "--y", "0.2", "--lambda", "0.5"],
    ["certify", "--t", "0.5", "--x", "1.5", "--y", "0.2"],
    ["limits", "--function", "const:0.3", "--horizon", "1"],
    ["limits", "--function", "const:0.3", "--horizon", "5.5"],
    ["tensor-check", "--function", "probit-affine:1,2"],
]


@pytest.mark.parametrize("argv", usage_error_cases)
def test_usage_errors(argv, tmp_path):
    assert main(["-o", str(tmp_path / "out"), *argv]) == EXIT_USAGE


@pytest.mark.parametrize("threads", ["0", "many"])
def test_invalid_threads(threads, tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, threads)
    argv = ["-o", str(tmp_path / "out.csv"), "hjb-sweep", *small_grid]
    assert main(argv) == EXIT_USAGE


def test_help(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "hjb-sweep" in capsys.readouterr().out
