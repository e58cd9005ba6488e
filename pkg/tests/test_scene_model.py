import struct

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from dynstyle.camera import Camera, look_at, read_camera_file, write_camera_file
from dynstyle.deformation import DeformationField, layer_shapes
from dynstyle.scene import (
    MAGIC, Gaussian, GaussianSet, InvariantViolation, Scene, SceneFormatError, StyleGaussian, deform,
    init_from_points, load_scene, save_scene,
)
from dynstyle.style_mlp import flatten, mlp_init, mlp_init_batch, unflatten

from conftest import random_scene


def _gauss(seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    return Gaussian(rng.normal(size=3), q / np.linalg.norm(q), rng.uniform(0.1, 1, 3), 0.4, rng.random(3))


def _shift_field(delta_mu):
    """Output bias = (delta_mu, 0...) and zero output weights: a constant mu offset."""
    f = DeformationField.zeros()
    chunks, k = [], 0
    for i, shape in enumerate(layer_shapes(4, 32)):
        n = int(np.prod(shape))
        chunk = np.zeros(n)
        if i == 5:
            chunk[:3] = delta_mu
        chunks.append(chunk)
        k += n
    return DeformationField(np.concatenate(chunks), f.encoding_frequencies, f.width)


# -- Camera --------------------------------------------------------------------


def test_camera_rejects_non_orthonormal_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.diag([1.0, 1.0, 1.1]), np.zeros(3), 10, 10, 5, 5, 10, 10)


def test_camera_rejects_principal_point_outside_image():
    with pytest.raises(ValueError, match="principal point"):
        Camera(np.eye(3), np.zeros(3), 10, 10, 10, 5, 10, 10)


def test_camera_file_round_trip(tmp_path):
    cams = [look_at([0, 0, -3], np.zeros(3), fx=30, fy=31, width=32, height=24),
            look_at([2, 1, -2], np.zeros(3), fx=40, fy=40, width=16, height=16)]
    write_camera_file(tmp_path / "cameras.txt", cams)
    assert read_camera_file(tmp_path / "cameras.txt") == cams


# -- deform --------------------------------------------------------------------


def test_zero_field_is_identity_at_half_time():
    g = _gauss()
    assert deform(g, DeformationField.zeros(), 0.5) == g


def test_fresh_field_is_identity():
    g = _gauss(3)
    assert deform(g, DeformationField.initialized(11), 0.25) == g


def test_hand_set_field_shifts_mu_by_unit_x():
    g = _gauss(1)
    out = deform(g, _shift_field([1.0, 0.0, 0.0]), 0.7)
    np.testing.assert_allclose(out.mu, g.mu + np.float32([1, 0, 0]), atol=1e-6)
    np.testing.assert_array_equal(out.rot, g.rot)
    np.testing.assert_array_equal(out.scale, g.scale)
    assert out.opacity == g.opacity
    np.testing.assert_array_equal(out.color, g.color)


def test_deform_rejects_time_outside_unit_interval():
    with pytest.raises(ValueError, match="outside"):
        deform(_gauss(), DeformationField.zeros(), 1.5)


def test_deform_reports_non_finite_output_with_index():
    f = _shift_field([np.inf, 0, 0])
    with pytest.raises(FloatingPointError, match="Gaussian 4"):
        deform(_gauss(), f, 0.1, index=4)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
@example(236, 0.0)   # renormalization used to move this f32 quaternion by one ulp
def test_zero_field_identity_property(seed, t):
    g = _gauss(seed)
    assert deform(g, DeformationField.zeros(), t) == g


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_quaternion_stays_unit_under_random_field(seed, t):
    rng = np.random.default_rng(seed)
    f = DeformationField(rng.normal(0, 0.3, DeformationField.zeros().params.size))
    out = deform(_gauss(seed), f, t)
    assert abs(np.linalg.norm(out.rot.astype(np.float64)) - 1.0) < 1e-6
    assert np.all(out.scale > 0)


# -- Gaussian / Scene invariants -------------------------------------------------


def test_gaussian_rejects_non_unit_quaternion():
    with pytest.raises(InvariantViolation):
        Gaussian(np.zeros(3), [2.0, 0, 0, 0], np.ones(3), 0.5, np.zeros(3))


def test_gaussian_rejects_opacity_outside_open_interval():
    with pytest.raises(InvariantViolation):
        Gaussian(np.zeros(3), [1.0, 0, 0, 0], np.ones(3), 1.0, np.zeros(3))


def test_gaussian_rejects_non_positive_scale():
    with pytest.raises(InvariantViolation):
        Gaussian(np.zeros(3), [1.0, 0, 0, 0], [1.0, 0.0, 1.0], 0.5, np.zeros(3))


def test_empty_scene_rejected():
    with pytest.raises(InvariantViolation):
        GaussianSet.from_list([])


def test_style_gaussian_set_round_trip():
    # storage is float32, so start from float32-representable MLP weights
    items = [StyleGaussian(_gauss(i), unflatten(flatten(mlp_init(i)).astype(np.float32))) for i in range(3)]
    gs = GaussianSet.from_list(items)
    assert [gs[i] for i in range(3)] == items


# -- serialization ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    s = random_scene(3, n=6, sh=True, mlp=mlp_init_batch(6, 3), deform_noise=0.1)
    save_scene(s, tmp_path / "s.s4ds")
    assert load_scene(tmp_path / "s.s4ds") == s


@settings(max_examples=1000)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.booleans(), st.booleans())
def test_round_trip_is_bit_exact(tmp_path, seed, n, sh, mlp):
    s = random_scene(seed, n=n, sh=sh, mlp=mlp_init_batch(n, seed) if mlp else None, deform_noise=0.05)
    path = tmp_path / "s.s4ds"
    save_scene(s, path)
    back = load_scene(path)
    assert back == s
    save_scene(back, path.with_suffix(".again"))
    assert path.read_bytes() == path.with_suffix(".again").read_bytes()


def test_load_rejects_zero_quaternion(tmp_path):
    s = random_scene(0, n=2)
    path = tmp_path / "s.s4ds"
    save_scene(s, path)
    data = bytearray(path.read_bytes())
    rot_offset = len(MAGIC) + struct.calcsize("<IQI") + 12 + 4 + 2 * 12
    data[rot_offset:rot_offset + 16] = bytes(16)
    path.write_bytes(bytes(data))
    with pytest.raises(InvariantViolation):
        load_scene(path)


def test_load_rejects_wrong_magic(tmp_path):
    path = tmp_path / "s.s4ds"
    save_scene(random_scene(0, n=2), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(SceneFormatError, match="magic"):
        load_scene(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "s.s4ds"
    save_scene(random_scene(0, n=2), path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(SceneFormatError, match="truncated"):
        load_scene(path)


def test_load_rejects_version_mismatch(tmp_path):
    path = tmp_path / "s.s4ds"
    save_scene(random_scene(0, n=2), path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(SceneFormatError, match="version"):
        load_scene(path)


# -- init_from_points ------------------------------------------------------------


def test_single_point_gives_single_gaussian():
    s = init_from_points([[0.1, 0.2, 0.3]], [[0.5, 0.25, 1.0]], 10)
    assert len(s.gaussians) == 1
    np.testing.assert_array_equal(s.gaussians.mu[0], np.float32([0.1, 0.2, 0.3]))
    np.testing.assert_array_equal(s.gaussians.color[0], np.float32([0.5, 0.25, 1.0]))


def test_count_target_caps_gaussians():
    rng = np.random.default_rng(0)
    s = init_from_points(rng.normal(size=(10_000, 3)), rng.random((10_000, 3)), 4000)
    assert len(s.gaussians) <= 4000


def test_two_points_scale_equals_distance():
    d = 0.37
    s = init_from_points([[0, 0, 0], [d, 0, 0]], [[1, 0, 0], [0, 1, 0]], 10)
    np.testing.assert_allclose(s.gaussians.scale, np.float32(d), rtol=1e-6)


def test_init_defaults_opacity_half_and_identity_deformation():
    rng = np.random.default_rng(1)
    s = init_from_points(rng.normal(size=(50, 3)), rng.random((50, 3)), 50)
    np.testing.assert_array_equal(s.gaussians.opacity, np.float32(0.5))
    g = s.gaussians[7]
    assert deform(g, s.deformation, 0.6) == g


def test_init_rejects_empty_input():
    with pytest.raises(ValueError, match="at least one point"):
        init_from_points(np.zeros((0, 3)), np.zeros((0, 3)), 5)


def test_scene_rejects_background_outside_unit_cube():
    s = random_scene(0, n=2)
    with pytest.raises(InvariantViolation):
        Scene(s.gaussians, s.deformation, [], [1.5, 0, 0])
