import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdgs.geometry import (
    Camera, Gaussian3D, GaussianCloud, covariance, quat_to_rotmat, scene_aabb, sigmoid, viewing_direction,
    viewing_directions,
)
from vdgs._validation import ValidationError

from conftest import unit

finite = st.floats(-3, 3, allow_nan=False)


def g(log_scale=(0, 0, 0), rotation=(1, 0, 0, 0), mean=(0, 0, 0)):
    return Gaussian3D(np.array(mean, float), np.array(log_scale, float), np.array(rotation, float), 0.0,
                      np.zeros((3, 1)))


def test_identity_covariance():
    np.testing.assert_allclose(covariance(g()), np.eye(3), atol=1e-15)


def test_axis_scaling():
    np.testing.assert_allclose(covariance(g(log_scale=(np.log(2), 0, 0))), np.diag([4.0, 1, 1]), atol=1e-12)


def test_quaternion_sign_invariance(rng):
    q = unit(rng.normal(size=4))
    ls = rng.normal(size=3)
    np.testing.assert_allclose(covariance(g(ls, q)), covariance(g(ls, -q)), atol=1e-12)


def test_unnormalized_quaternion_is_normalized(rng):
    q = unit(rng.normal(size=4))
    np.testing.assert_allclose(quat_to_rotmat(q * 7.3), quat_to_rotmat(q), atol=1e-12)
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=4, max_size=4))
def test_covariance_eigenvalues_are_squared_scales(ls, q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    cov = covariance(g(ls, q))
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(cov))
    expect = np.sort(np.exp(2 * np.array(ls)))
    assert np.all(eig > 0)
    np.testing.assert_allclose(eig, expect, rtol=1e-9, atol=1e-12)


def test_opacity_in_open_interval():
    for x in (-30.0, -1.0, 0.0, 2.0, 30.0):
        o = sigmoid(x)
        assert 0 < o < 1 or x in (-30.0, 30.0)
    assert g().opacity == 0.5


def test_viewing_direction_examples():
    cam = Camera(8, 8, 10, 10, 4, 4, np.eye(4))
    np.testing.assert_allclose(viewing_direction(cam, g(mean=(0, 0, 5))), [0, 0, 1])
    np.testing.assert_allclose(viewing_direction(cam, g(mean=(3, 0, 4))), [0.6, 0, 0.8])
    # degenerate: mean at the camera center falls back to the forward axis
    np.testing.assert_allclose(viewing_direction(cam, g(mean=(0, 0, 0))), cam.forward)


def test_viewing_directions_unit_norm(rng):
    for _ in range(1000 // 50):
        eye = rng.normal(size=3) * 3
        cam = Camera.look_at(eye, rng.normal(size=3) * 0.1, 16, 16, 0.8)
        d = viewing_directions(cam, rng.normal(size=(50, 3)))
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)


def test_camera_invariants():
    with pytest.raises(ValidationError):
        Camera(8, 8, 0, 10, 4, 4)
    with pytest.raises(ValidationError):
        Camera(8, 8, 10, 10, 4, 4, near=1.0, far=0.5)
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValidationError):
        Camera(8, 8, 10, 10, 4, 4, bad)


def test_look_at_frame():
    cam = Camera.look_at([0, -4, 0], [0, 0, 0], 32, 32, 0.9)
    np.testing.assert_allclose(cam.center, [0, -4, 0], atol=1e-12)
    np.testing.assert_allclose(cam.forward, [0, 1, 0], atol=1e-12)
    # world up (+z) maps to image up (-y in the camera frame)
    assert (cam.rotation @ np.array([0, 0, 1.0]))[1] < 0


def test_cloud_validation_and_select():
    c = GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros(2),
                      np.zeros((2, 3, 4)), sh_degree=1)
    assert len(c) == 2 and len(c.select([1])) == 1 and len(c.concat(c)) == 4
    with pytest.raises(ValidationError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 3, 1)),
                      sh_degree=1)
    with pytest.raises(ValidationError):
        GaussianCloud(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 4)), np.zeros(1), np.zeros((1, 3, 1)),
                      sh_degree=4)


def test_check_finite_names_index():
    c = GaussianCloud(np.zeros((3, 3)), np.zeros((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)), np.zeros(3),
                      np.zeros((3, 3, 1)))
    c.log_scales[2, 1] = np.nan
    with pytest.raises(FloatingPointError, match="2"):
        c.check_finite()


def test_scene_aabb_padding():
    box = scene_aabb(np.array([[0, 0, 0], [1, 2, 4.0]]), pad=0.1)
    np.testing.assert_allclose(box, [[-0.1, -0.2, -0.4], [1.1, 2.2, 4.4]])
