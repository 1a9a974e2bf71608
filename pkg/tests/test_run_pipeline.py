import json
import shutil

import pandas as pd
import pytest

from run_pipeline import main, progress_bar

SMALL = [
    "--set", "phantom.dims=[40, 40, 10]",
    "--set", "phantom.inner_radius_mm=8",
    "--set", "phantom.outer_radius_mm=10",
    "--set", "registration.max_iterations=20",
    "--set", "curvature.max_iterations=100",
    "--set", "curvature.k_neighbors=40",
]


def run(cmd, out, *extra):
    return main([cmd, "--output", str(out), *extra])


def test_progress_bar():
    assert progress_bar(0, 4, width=4) == "[░░░░] 0/4"
    assert progress_bar(2, 4, width=4) == "[██░░] 2/4"


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", a, *SMALL) == 0
    assert run("synth", b, *SMALL) == 0
    names = ["diastolic.vol", "diastolic.raw", "systolic.vol", "systolic.raw", "wall_mask.vol", "truth_params.yaml"]
    for name in names:
        assert (a / "synth" / name).read_bytes() == (b / "synth" / name).read_bytes(), name


def test_resume_skips_completed_stage(tmp_path, capsys):
    assert run("synth", tmp_path, *SMALL) == 0
    capsys.readouterr()
    assert run("synth", tmp_path, "--resume", *SMALL) == 0
    assert "skipped" in capsys.readouterr().out


@pytest.mark.parametrize(
    "args",
    [
        ["synth", "--set", "phantom.inner_radius_mm=30"],
        ["synth", "--set", "registration.lamda=1"],
        ["register", "--set", "paths.fixed=/nonexistent/fixed.nii"],
    ],
)
def test_configuration_errors_exit_1(tmp_path, args, capsys):
    assert main([*args, "--output", str(tmp_path)]) == 1
    assert "FAILED (1)" in capsys.readouterr().out


def test_kinematics_before_surface_exits_2(tmp_path, capsys):
    assert run("kinematics", tmp_path) == 2
    assert "Missing wall point cloud" in capsys.readouterr().out


def test_cohort_from_csv(tmp_path):
    src = tmp_path / "cases.csv"
    pd.DataFrame({
        "case_id": ["1", "2", "3"],
        "U_o": [1.34, 1.31, 1.00],
        "u_o": [0.99, 1.13, 0.82],
        "eps_o": [0.0554, 0.0523, 0.0446],
    }).to_csv(src, index=False)
    assert run("cohort", tmp_path, "--source", str(src)) == 0
    table = pd.read_csv(tmp_path / "cohort.csv")
    assert list(table["case_id"].astype(str)) == ["1", "2", "3", "Minimum", "Maximum", "Average", "Standard deviation"]
    assert table.loc[4, "U_o"] == pytest.approx(1.34)
    assert table.loc[5, "eps_o"] == pytest.approx(100 * (0.0554 + 0.0523 + 0.0446) / 3, rel=1e-4)

    assert run("cohort", tmp_path, "--source", str(tmp_path / "missing.csv")) == 2


@pytest.mark.slow
def test_small_pipeline_then_report_and_cohort(tmp_path, capsys):
    code = run("pipeline", tmp_path, *SMALL)
    assert code in (0, 3)
    assert (tmp_path / "kinematics" / "summary_full.json").exists()
    assert (tmp_path / "verify" / "report_full.json").exists()
    assert (tmp_path / "register" / "history.csv").exists()

    assert run("report", tmp_path, *SMALL) == 0
    assert "<html" in (tmp_path / "report.html").read_text(encoding="utf-8").lower()
    assert run("cohort", tmp_path, *SMALL) == 0
    cohort = pd.read_csv(tmp_path / "cohort.csv")
    assert cohort.loc[0, "case_id"] == "phantom"

    capsys.readouterr()
    assert run("pipeline", tmp_path, "--resume", *SMALL) == code
    assert capsys.readouterr().out.count("skipped") == 5


@pytest.mark.slow
def test_default_phantom_end_to_end(tmp_path):
    assert run("pipeline", tmp_path) == 0
    report = json.loads((tmp_path / "verify" / "report_full.json").read_text())
    assert report["channels"]["normal"]["r_squared"] >= 0.95
    summary = json.loads((tmp_path / "kinematics" / "summary_full.json").read_text())
    truth = json.loads((tmp_path / "kinematics" / "truth_summary_full.json").read_text())
    assert summary["eps_o"] == pytest.approx(truth["eps_o"], rel=0.10)

    # heavy regularisation flattens the recovered motion below the thresholds
    for stage in ("register", "kinematics", "verify"):
        shutil.rmtree(tmp_path / stage)
    assert run("pipeline", tmp_path, "--resume", "--set", "registration.lambda=10") == 3

    # an axial component makes the tangential channel harder to recover than the normal one
    for stage in ("synth", "register", "kinematics", "verify"):
        shutil.rmtree(tmp_path / stage)
    assert run("pipeline", tmp_path, "--resume", "--set", "field.axial_mm=0.5") in (0, 3)
    report = json.loads((tmp_path / "verify" / "report_full.json").read_text())
    tangential = report["channels"]["tangential"]["r_squared"]
    assert tangential is not None
    assert tangential < report["channels"]["normal"]["r_squared"]


@pytest.mark.slow
def test_pipeline_outputs_are_bit_identical_on_rerun(tmp_path):
    stages = ("synth", "register", "surface", "kinematics", "verify")

    def snapshot():
        files = [p for s in stages for p in sorted((tmp_path / s).rglob("*")) if p.is_file()]
        files.append(tmp_path / "report.html")
        return {p.relative_to(tmp_path).as_posix(): p.read_bytes() for p in files}

    code = run("pipeline", tmp_path, *SMALL)
    assert run("report", tmp_path, *SMALL) == 0
    first = snapshot()
    assert "surface/wall.ply" in first and "verify/report_full.json" in first

    for stage in stages:
        shutil.rmtree(tmp_path / stage)
    (tmp_path / "report.html").unlink()
    assert run("pipeline", tmp_path, *SMALL) == code
    assert run("report", tmp_path, *SMALL) == 0
    second = snapshot()
    assert sorted(second) == sorted(first)
    for name, data in first.items():
        assert second[name] == data, name
