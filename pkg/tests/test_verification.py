import json

import numpy as np
import pandas as pd
import pytest

from errors import VerificationError
from kinematics import compute_wall_kinematics
from synthetic_truth import AnalyticField
from verification import (
    AcceptanceThresholds,
    VerificationOptions,
    angle_between,
    angles_between,
    build_report,
    check_acceptance,
    histogram_gaussian_fit,
    intensity_alignment,
    nrmse,
    paired_t_statistic,
    qq_pairs,
    r_squared_identity,
    report_to_dict,
    write_plot_script,
    write_report_csvs,
    write_report_json,
)
from volume_core import Volume3


def test_r_squared_identity():
    t = np.array([1.0, 2.0, 3.0])
    assert r_squared_identity(t, t) == 1.0
    assert r_squared_identity(t, np.full(3, t.mean())) == pytest.approx(0.0)
    assert r_squared_identity(t, [1.1, 1.9, 3.2]) == pytest.approx(0.97)
    assert r_squared_identity(t, -t) < 0
    with pytest.raises(VerificationError, match="zero variance"):
        r_squared_identity([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(VerificationError, match="mismatch"):
        r_squared_identity([1.0, 2.0], [1.0])


def test_nrmse():
    assert nrmse([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == 0.0
    assert nrmse([0.0, 1.0], [0.1, 0.9]) == pytest.approx(0.1)
    t = np.array([0.0, 1.0, 2.0, 3.0])
    e = t + 0.2
    assert nrmse(t, e, "std") == pytest.approx(0.2 / np.std(t, ddof=1))
    with pytest.raises(VerificationError):
        nrmse([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(VerificationError):
        nrmse(t, e, "iqr")


def test_angles():
    assert angle_between((1, 2, 3), (1, 2, 3)) == pytest.approx(0.0, abs=1e-6)
    assert angle_between((1, 0, 0), (0, 1, 0)) == pytest.approx(90.0)
    assert angle_between((1, 0, 0), (-1, 0, 0)) == pytest.approx(180.0)
    assert angle_between((0, 0, 0), (1, 0, 0)) is None
    rows = angles_between(np.array([[1, 0, 0], [0, 0, 0]]), np.array([[0, 0, 1], [1, 0, 0]]))
    assert rows[0] == pytest.approx(90.0)
    assert np.isnan(rows[1])


def test_qq_pairs(rng):
    t = rng.normal(size=300)
    same = np.array(qq_pairs(t, t, 99))
    np.testing.assert_allclose(same[:, 0], same[:, 1])
    shifted = np.array(qq_pairs(t, t + 1.0, 99))
    np.testing.assert_allclose(shifted[:, 1], shifted[:, 0] + 1.0, atol=1e-12)

    u = rng.uniform(size=50)
    s = np.sort(u)
    pairs = np.array(qq_pairs(u, s, 5))
    expected = [np.percentile(s, p) for p in np.linspace(0.5, 99.5, 5)]
    np.testing.assert_allclose(pairs[:, 0], expected)
    np.testing.assert_allclose(pairs[:, 1], expected)

    with pytest.raises(VerificationError):
        qq_pairs([], [1.0], 5)


def test_histogram_gaussian_fit(rng):
    assert histogram_gaussian_fit([-1.0, 0.0, 1.0], 4).mu == 0.0

    fit = histogram_gaussian_fit(rng.normal(size=10_000), 40)
    assert len(fit.edges) == 41
    assert fit.counts.sum() == 10_000
    assert fit.mu == pytest.approx(0.0, abs=0.05)
    assert fit.sigma == pytest.approx(1.0, abs=0.05)

    flat = histogram_gaussian_fit([2.0] * 5, 10)
    assert flat.sigma == 0.0
    assert list(flat.counts) == [5]


def test_paired_t_statistic():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    assert paired_t_statistic(t, t) == (None, None)
    stat, p = paired_t_statistic(t, t + np.array([0.1, 0.2, 0.1, 0.2]))
    assert stat > 0
    assert 0.0 < p < 0.05


def _kinematics_pair(cylinder_cloud, estimate_field):
    cloud = cylinder_cloud(radius=25.0, n_theta=72, z_values=np.linspace(0.0, 40.0, 41))
    cloud = cloud.evolve(radius=np.full(len(cloud), 25.0))
    truth = AnalyticField(dr_max_mm=1.0, axial_mm=0.3, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, _ = compute_wall_kinematics(cloud, truth)
    est_kin, _ = compute_wall_kinematics(cloud, estimate_field)
    return truth_kin, est_kin


def test_report_for_perfect_estimate(cylinder_cloud):
    field = AnalyticField(dr_max_mm=1.0, axial_mm=0.3, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, est_kin = _kinematics_pair(cylinder_cloud, field)
    report = build_report(truth_kin, est_kin)
    for name, m in report.channels.items():
        assert m.r_squared == pytest.approx(1.0), name
        assert m.nrmse == pytest.approx(0.0, abs=1e-12), name
        assert m.percentile_rel_diff == pytest.approx(0.0, abs=1e-12), name
    assert report.t_test == {"normal_t": None, "normal_p": None}
    assert report.n_points == len(truth_kin)
    assert check_acceptance(report, AcceptanceThresholds(require_tangential_below_normal=False)) == []


def test_report_marks_degenerate_channels(cylinder_cloud):
    cloud = cylinder_cloud(radius=25.0, n_theta=72, z_values=np.linspace(0.0, 40.0, 41))
    cloud = cloud.evolve(radius=np.full(len(cloud), 25.0))
    radial = AnalyticField(dr_max_mm=1.0, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, _ = compute_wall_kinematics(cloud, radial)
    est_kin, _ = compute_wall_kinematics(cloud, AnalyticField(dr_max_mm=0.9, axis_point=(0, 0, 0), length_mm=40.0))
    report = build_report(truth_kin, est_kin)
    tangential = report.channels["tangential"]
    assert tangential.r_squared is None
    assert "r_squared" in tangential.undefined
    assert report.channels["normal"].r_squared < 1.0
    assert report.angles["tangential_mean_deg"] is None

    doc = report_to_dict(report)
    json.dumps(doc)
    assert doc["channels"]["tangential"]["r_squared"] is None


def test_report_rejects_mismatched_point_sets(cylinder_cloud):
    field = AnalyticField(dr_max_mm=1.0, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, est_kin = _kinematics_pair(cylinder_cloud, field)
    est_kin.points = est_kin.points + 1.0
    with pytest.raises(VerificationError, match="different point sets"):
        build_report(truth_kin, est_kin)
    with pytest.raises(VerificationError):
        build_report(truth_kin, est_kin, VerificationOptions(nrmse_mode="mad"))


def test_acceptance_flags_a_poor_estimate(cylinder_cloud):
    biased = AnalyticField(dr_max_mm=0.6, axial_mm=0.3, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, est_kin = _kinematics_pair(cylinder_cloud, biased)
    report = build_report(truth_kin, est_kin)
    violations = check_acceptance(report, AcceptanceThresholds())
    assert any("normal R^2" in v for v in violations)
    assert any("strain" in v for v in violations)


def test_tangential_criterion(cylinder_cloud):
    truth_kin, est_kin = _kinematics_pair(
        cylinder_cloud, AnalyticField(dr_max_mm=1.0, axial_mm=0.3, axis_point=(0, 0, 0), length_mm=40.0)
    )
    report = build_report(truth_kin, est_kin)
    violations = check_acceptance(report, AcceptanceThresholds(require_tangential_below_normal=True))
    assert any("tangential" in v for v in violations)


def test_tangential_criterion_without_tangential_motion(cylinder_cloud):
    cloud = cylinder_cloud(radius=25.0, n_theta=72, z_values=np.linspace(0.0, 40.0, 41))
    cloud = cloud.evolve(radius=np.full(len(cloud), 25.0))
    truth_kin, _ = compute_wall_kinematics(cloud, AnalyticField(dr_max_mm=1.0, axis_point=(0, 0, 0), length_mm=40.0))
    report = build_report(truth_kin, truth_kin)
    violations = check_acceptance(report, AcceptanceThresholds(require_tangential_below_normal=True))
    assert len(violations) == 1
    assert violations[0].startswith("tangential R^2 not evaluated")
    assert "zero variance" in violations[0]
    assert check_acceptance(report, AcceptanceThresholds()) == []


def test_report_files(tmp_path, cylinder_cloud):
    field = AnalyticField(dr_max_mm=0.95, axial_mm=0.25, axis_point=(0, 0, 0), length_mm=40.0)
    truth_kin, est_kin = _kinematics_pair(cylinder_cloud, field)
    report = build_report(truth_kin, est_kin, VerificationOptions(qq_points=11, histogram_bins=8))
    write_report_json(report, tmp_path / "report.json")
    paths = write_report_csvs(report, tmp_path)
    script = write_plot_script(report, tmp_path)

    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["channels"]) == {"magnitude", "normal", "tangential", "strain"}
    assert len(doc["qq_pairs"]["normal"]) == 11
    scatter = pd.read_csv(paths["scatter"])
    assert len(scatter) == report.n_points
    assert {"normal_truth", "normal_registration", "displacement_angle_deg"} <= set(scatter.columns)
    assert len(pd.read_csv(paths["histogram"])) == 8
    assert "matplotlib" in script.read_text()


def test_intensity_alignment():
    fixed = Volume3(np.full((4, 4, 4), 10.0))
    moving = Volume3(np.full((4, 4, 4), 6.0))
    registered = Volume3(np.full((4, 4, 4), 9.0))
    out = intensity_alignment(fixed, moving, registered)
    assert out["mean_abs_diff_before"] == 4.0
    assert out["mean_abs_diff_after"] == 1.0
    assert out["improvement_ratio"] == 0.25
