import math

import numpy as np
import pytest

from errors import GeometryError
from surface_geometry import (
    CurvatureParams,
    PointCloud,
    estimate_normals,
    extract_wall_points,
    fill_lumen,
    fit_cylinder_msac,
    knn,
    knn_batch,
    load_cloud_csv,
    load_ply,
    orient_normals,
    radius_of_curvature_field,
    save_cloud_csv,
    save_ply,
)
from volume_core import Volume3


def _angle_deg(a, b):
    a = np.asarray(a) / np.linalg.norm(a)
    b = np.asarray(b) / np.linalg.norm(b)
    return math.degrees(math.acos(min(1.0, abs(float(a @ b)))))


# --- wall points ------------------------------------------------------------

def test_single_voxel_is_its_own_surface():
    data = np.zeros((5, 5, 5))
    data[2, 3, 1] = 1.0
    cloud = extract_wall_points(Volume3(data, (0.5, 0.5, 2.0), (1.0, 0.0, 0.0)))
    np.testing.assert_allclose(cloud.points, [[2.0, 1.5, 2.0]])


def test_box_shell_count():
    data = np.zeros((11, 11, 11))
    data[3:8, 3:8, 3:8] = 1.0
    cloud = extract_wall_points(Volume3(data))
    assert len(cloud) == 5 ** 3 - 3 ** 3


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_uniform_mask_has_no_surface(value):
    with pytest.raises(GeometryError, match="Empty wall surface"):
        extract_wall_points(Volume3(np.full((4, 4, 4), value)))


def test_fill_lumen_closes_annulus_slices():
    x = np.arange(21) - 10.0
    X, Y = np.meshgrid(x, x, indexing="ij")
    rho = np.hypot(X, Y)
    ring = ((rho >= 6) & (rho <= 8)).astype(float)
    mask = Volume3(np.repeat(ring[:, :, None], 4, axis=2))
    filled = fill_lumen(mask)
    np.testing.assert_array_equal(filled.data[..., 2] > 0.5, rho <= 8)
    outer = extract_wall_points(filled)
    radii = np.hypot(outer.points[:, 0] - 10, outer.points[:, 1] - 10)
    side = (outer.points[:, 2] > 0) & (outer.points[:, 2] < 3)
    assert radii[side].min() > 6.5


# --- neighbours -------------------------------------------------------------

def test_knn_orders_by_distance_then_index():
    cloud = PointCloud([[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, 1, 0], [5, 5, 5]])
    np.testing.assert_array_equal(knn(cloud, [0, 0, 0], 3), [0, 1, 3])
    np.testing.assert_array_equal(knn(cloud, [0, 0, 0], 5), [0, 1, 3, 2, 4])
    for k in (0, 6):
        with pytest.raises(GeometryError):
            knn(cloud, [0, 0, 0], k)


def test_knn_matches_brute_force(rng):
    cloud = PointCloud(rng.uniform(-10, 10, size=(2000, 3)))
    for q in rng.uniform(-10, 10, size=(100, 3)):
        d2 = np.sum((cloud.points - q) ** 2, axis=1)
        expected = np.lexsort((np.arange(2000), d2))[:20]
        np.testing.assert_array_equal(knn(cloud, q, 20), expected)


def test_knn_batch_rows_start_with_self(rng):
    cloud = PointCloud(rng.uniform(-10, 10, size=(200, 3)))
    nbrs = knn_batch(cloud, 8)
    assert nbrs.shape == (200, 8)
    np.testing.assert_array_equal(nbrs[:, 0], np.arange(200))
    np.testing.assert_array_equal(nbrs[17], knn(cloud, cloud.points[17], 8))


# --- normals ----------------------------------------------------------------

def test_plane_normals(rng):
    n_true = np.array([1.0, -2.0, 0.5])
    n_true /= np.linalg.norm(n_true)
    u = np.cross(n_true, [0, 0, 1.0])
    u /= np.linalg.norm(u)
    v = np.cross(n_true, u)
    st = rng.uniform(-5, 5, size=(400, 2))
    cloud = PointCloud(st[:, :1] * u + st[:, 1:] * v + 3.0)
    out = estimate_normals(cloud, 20)
    assert out.valid.all()
    np.testing.assert_allclose(np.abs(out.normals @ n_true), 1.0, atol=1e-9)


def test_cylinder_normals_are_radial(cylinder_cloud):
    truth = cylinder_cloud()
    out = estimate_normals(PointCloud(truth.points), 30)
    angles = [_angle_deg(a, b) for a, b in zip(out.normals, truth.normals)]
    assert max(angles) <= 2.0


def test_collinear_points_have_no_normal():
    cloud = PointCloud(np.column_stack([np.arange(10.0), 2 * np.arange(10.0), np.zeros(10)]))
    out = estimate_normals(cloud, 5)
    assert not out.valid.any()
    assert np.isnan(out.normals).all()


def test_normals_rotate_with_the_cloud(cylinder_cloud, rng):
    base = cylinder_cloud(n_random=1500, rng=rng)
    c, s = math.cos(0.4), math.sin(0.4)
    R = np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    n0 = estimate_normals(PointCloud(base.points), 25).normals
    n1 = estimate_normals(PointCloud(base.points @ R.T), 25).normals
    np.testing.assert_allclose(np.abs(np.einsum("ij,ij->i", n0 @ R.T, n1)), 1.0, atol=1e-9)


def test_orientation_points_outward_on_cylinder(cylinder_cloud):
    truth = cylinder_cloud()
    est = estimate_normals(PointCloud(truth.points), 30)
    oriented = orient_normals(est, (0, 0, 1))
    assert np.all(np.einsum("ij,ij->i", oriented.normals, truth.normals) > 0)
    again = orient_normals(oriented, (0, 0, 1))
    np.testing.assert_array_equal(again.normals, oriented.normals)


def test_orientation_points_outward_on_sphere(sphere_cloud):
    truth = sphere_cloud()
    oriented = orient_normals(estimate_normals(PointCloud(truth.points), 30), (0, 0, 1))
    band = np.abs(truth.points[:, 2]) < 0.8 * 30.0
    assert np.all(np.einsum("ij,ij->i", oriented.normals[band], truth.normals[band]) > 0)


# --- cylinder fitting -------------------------------------------------------

def test_msac_noiseless_cylinder_with_and_without_normals(cylinder_cloud, rng):
    patch = cylinder_cloud(n_random=200, rng=rng, theta_span=math.pi / 2, z_values=[0.0, 10.0])
    params = CurvatureParams()
    for normals in (patch.normals, None):
        fit = fit_cylinder_msac(patch.points, params, normals=normals, seed=3)
        assert fit.success
        assert fit.radius == pytest.approx(25.0, abs=0.025)
        assert _angle_deg(fit.axis_dir, (0, 0, 1)) < 0.1
        assert fit.inlier_count == 200


def test_msac_tolerates_outliers(cylinder_cloud, rng):
    inliers = cylinder_cloud(n_random=140, rng=rng, theta_span=math.pi / 2, z_values=[0.0, 10.0]).points
    theta = rng.uniform(0, math.pi / 2, 60)
    rho = rng.uniform(20.0, 30.0, 60)
    outliers = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), rng.uniform(0, 10, 60)])
    pts = np.vstack([inliers, outliers])
    fit = fit_cylinder_msac(pts, CurvatureParams(), seed=11)
    assert fit.success
    assert fit.radius == pytest.approx(25.0, rel=0.01)


def test_msac_fails_on_a_plane(rng):
    yz = rng.uniform(-5, 5, size=(120, 2))
    pts = np.column_stack([np.full(120, 25.0), yz])
    normals = np.tile([1.0, 0.0, 0.0], (120, 1))
    assert not fit_cylinder_msac(pts, CurvatureParams(), normals=normals, seed=1).success
    assert not fit_cylinder_msac(pts, CurvatureParams(), seed=1).success


def test_msac_axis_stays_in_cone(rng):
    params = CurvatureParams(axis_cone_deg=30.0)
    for trial in range(5):
        pts = rng.normal(scale=[8.0, 3.0, 5.0], size=(80, 3))
        fit = fit_cylinder_msac(pts, params, seed=trial)
        assert _angle_deg(fit.axis_dir, params.reference_axis) <= 30.0 + 1e-9


def test_msac_is_deterministic_for_a_seed(cylinder_cloud, rng):
    patch = cylinder_cloud(n_random=120, rng=rng, theta_span=1.0, z_values=[0.0, 6.0])
    noisy = patch.points + rng.normal(scale=0.1, size=patch.points.shape)
    a = fit_cylinder_msac(noisy, CurvatureParams(), seed=5)
    b = fit_cylinder_msac(noisy, CurvatureParams(), seed=5)
    assert a.radius == b.radius
    np.testing.assert_array_equal(a.axis_dir, b.axis_dir)


def test_radius_field_on_cylinder(cylinder_cloud):
    cloud = cylinder_cloud(n_theta=120, z_values=np.arange(12) * 0.5)
    params = CurvatureParams(k_neighbors=30, max_iterations=100)
    out = radius_of_curvature_field(cloud, params)
    assert out.valid.all()
    np.testing.assert_allclose(out.radius, 25.0, rtol=0.01)
    assert not out.attributes["radius_filled"].any()


@pytest.mark.slow
def test_radius_field_on_sphere_near_equator(sphere_cloud):
    truth = sphere_cloud()
    cloud = orient_normals(estimate_normals(PointCloud(truth.points), 30), (0, 0, 1))
    out = radius_of_curvature_field(cloud, CurvatureParams(k_neighbors=40, max_iterations=150))
    equator = np.abs(truth.points[:, 2]) < 3.0
    assert out.valid[equator].all()
    np.testing.assert_allclose(out.radius[equator], 30.0, rtol=0.05)


def test_radius_field_raises_when_most_fits_fail(rng):
    yz = rng.uniform(-10, 10, size=(200, 2))
    cloud = PointCloud(np.column_stack([np.zeros(200), yz]), normals=np.tile([1.0, 0, 0], (200, 1)))
    with pytest.raises(GeometryError, match="cylinder fits failed"):
        radius_of_curvature_field(cloud, CurvatureParams(k_neighbors=20, max_iterations=50))


# --- I/O --------------------------------------------------------------------

def _decorated_cloud(rng):
    n = 25
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[3] = np.nan
    valid = np.ones(n, dtype=bool)
    valid[3] = False
    return PointCloud(rng.normal(size=(n, 3)) * 10, normals, rng.uniform(20, 30, n), valid,
                      {"strain": rng.normal(size=n) / 100})


@pytest.mark.parametrize("suffix", [".ply", ".csv"])
def test_cloud_round_trip(tmp_path, rng, suffix):
    cloud = _decorated_cloud(rng)
    path = tmp_path / f"wall{suffix}"
    if suffix == ".ply":
        save_ply(cloud, path)
        back = load_ply(path)
    else:
        save_cloud_csv(cloud, path)
        back = load_cloud_csv(path)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.normals, cloud.normals)
    np.testing.assert_array_equal(back.radius, cloud.radius)
    np.testing.assert_array_equal(back.valid, cloud.valid)
    np.testing.assert_array_equal(back.attributes["strain"], cloud.attributes["strain"])


def test_load_ply_rejects_other_files(tmp_path):
    path = tmp_path / "x.ply"
    path.write_text("not a ply\n")
    with pytest.raises(GeometryError):
        load_ply(path)
