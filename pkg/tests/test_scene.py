import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatedit.scene import (
    Camera,
    DegenerateCovarianceError,
    Gaussian3D,
    GaussianScene,
    axis_angle_quat,
    covariance_of,
    eval_density,
    quat_to_rotmat,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
quat_st = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)
scale_st = st.lists(st.floats(0.01, 5.0), min_size=3, max_size=3)


def test_covariance_identity():
    g = Gaussian3D.create([0, 0, 0], 1.0, 0.5)
    np.testing.assert_array_equal(covariance_of(g), np.eye(3))


def test_covariance_axis_aligned():
    g = Gaussian3D.create([0, 0, 0], [2, 1, 1], 0.5)
    np.testing.assert_allclose(covariance_of(g), np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_rotated_about_z():
    q = axis_angle_quat([0, 0, 1], np.pi / 2)
    g = Gaussian3D.create([0, 0, 0], [2, 1, 1], 0.5, quat=q)
    # direct product with an explicit rotation matrix
    c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    expected = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
    np.testing.assert_allclose(covariance_of(g), expected, atol=1e-12)
    np.testing.assert_allclose(covariance_of(g), np.diag([1.0, 4.0, 1.0]), atol=1e-12)


@given(quat_st, scale_st)
@settings(max_examples=60, deadline=None)
def test_covariance_eigenvalues_are_squared_scales(q, s):
    g = Gaussian3D.create([0, 0, 0], s, 0.5, quat=q)
    cov = covariance_of(g)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(cov))
    np.testing.assert_allclose(eig, np.sort(np.square(s)), rtol=1e-6, atol=1e-6)


def test_density_at_mean_is_one():
    g = Gaussian3D.create([1, 2, 3], [0.3, 2, 1], 0.4, quat=[0.3, 0.1, 0.9, 0.2])
    assert eval_density(g, [1, 2, 3]) == 1.0


def test_density_unit_isotropic():
    g = Gaussian3D.create([0, 0, 0], 1.0, 0.5)
    assert eval_density(g, [1, 0, 0]) == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert eval_density(g, [1, 0, 0]) == pytest.approx(0.60653, abs=1e-5)


def test_density_anisotropic_matches_linear_solve():
    q = axis_angle_quat([0, 0, 1], np.pi / 2)
    g = Gaussian3D.create([0, 0, 0], [2, 1, 1], 0.5, quat=q)
    d = np.array([1.0, 1.0, 0.0])
    expected = np.exp(-0.5 * d @ np.linalg.solve(covariance_of(g), d))
    assert eval_density(g, d) == pytest.approx(expected, rel=1e-12)
    assert eval_density(g, d) == pytest.approx(np.exp(-0.5 * 1.25), rel=1e-12)


@given(quat_st, scale_st, st.lists(finite, min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_density_maximized_at_mean(q, s, offset):
    g = Gaussian3D.create([0.5, -0.2, 1.0], s, 0.5, quat=q)
    assert eval_density(g, g.mean + np.array(offset)) <= eval_density(g, g.mean)


def test_degenerate_scale_rejected():
    with pytest.raises(DegenerateCovarianceError):
        Gaussian3D.create([0, 0, 0], [1e-7, 1, 1], 0.5)
    g = Gaussian3D([0, 0, 0], [1, 0, 0, 0], np.log([1e-8, 1, 1]), 0.0, np.zeros((3, 1)))
    with pytest.raises(DegenerateCovarianceError):
        eval_density(g, [0, 0, 0])


def test_opacity_out_of_range_rejected():
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            Gaussian3D.create([0, 0, 0], 1.0, bad)


def test_storage_transforms():
    g = Gaussian3D.create([0, 0, 0], [0.5, 2, 3], 0.25, quat=[2, 0, 0, 0])
    np.testing.assert_allclose(g.scale, [0.5, 2, 3])
    assert g.opacity == pytest.approx(0.25)
    np.testing.assert_allclose(g.quat, [1, 0, 0, 0])


@given(quat_st)
@settings(max_examples=50, deadline=None)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_scene_roundtrips_through_gaussians():
    gs = [Gaussian3D.create(np.full(3, i), 0.1 * (i + 1), 0.3, rgb=[0.2, 0.4, 0.6],
                            editable=bool(i % 2)) for i in range(4)]
    scene = GaussianScene.from_gaussians(gs)
    assert len(scene) == 4 and scene.sh_degree == 0
    back = GaussianScene.from_gaussians(list(scene))
    assert back.equals(scene)
    assert list(scene.editable) == [False, True, False, True]


def test_scene_rejects_mixed_sh_degree():
    a = Gaussian3D.create([0, 0, 0], 1.0, 0.5, sh_degree=0)
    b = Gaussian3D.create([0, 0, 0], 1.0, 0.5, sh_degree=1)
    with pytest.raises(ValueError):
        GaussianScene.from_gaussians([a, b])


def test_scene_bbox_and_subset():
    scene = GaussianScene.from_gaussians(
        [Gaussian3D.create(m, 1.0, 0.5) for m in ([0, 0, 0], [1, -2, 3], [-1, 5, 0])])
    lo, hi = scene.bbox
    np.testing.assert_array_equal(lo, [-1, -2, 0])
    np.testing.assert_array_equal(hi, [1, 5, 3])
    assert len(scene.subset([0, 2])) == 2
    assert len(GaussianScene.empty()) == 0


def test_camera_validation():
    Camera(10, 10, 5, 5, 5, 5)
    with pytest.raises(ValueError):
        Camera(10, 10, 0, 5, 5, 5)
    with pytest.raises(ValueError):
        Camera(10, 10, 5, 5, 10, 5)
    with pytest.raises(ValueError):
        Camera(10, 10, 5, 5, 5, 5, R=np.diag([1.0, 1.0, 2.0]))


def test_look_at_points_forward():
    eye = np.array([1.0, 2.0, -3.0])
    cam = Camera.look_at(eye, [0, 0, 0], 32, 24)
    np.testing.assert_allclose(cam.center, eye, atol=1e-12)
    p = cam.world_to_cam(np.zeros(3))
    assert p[2] == pytest.approx(np.linalg.norm(eye))
    np.testing.assert_allclose(p[:2], 0, atol=1e-12)
    # world up lands in the upper half of the image (image y points down)
    assert cam.world_to_cam(np.array([0.0, 1.0, 0.0]))[1] < 0
