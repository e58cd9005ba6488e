import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynstyle.camera import Camera, helix_poses, look_at
from dynstyle.deformation import DeformationField
from dynstyle.gradcheck import check_rasterizer
from dynstyle.raster.project import COV2D_FLOOR, intersect_depth, project
from dynstyle.raster.render import (
    GaussianParams, SplatBatch, check_sorted, composite, composite_backward, render_backward, render_params,
    render_scene, render_trajectory,
)
from dynstyle.raster.trajectory import HelixSpec, helix_trajectory
from dynstyle.scene import Gaussian, Scene
from dynstyle.style_mlp import mlp_init_batch

from conftest import random_scene

OPAQUE = 40.0   # sigmoid(40) rounds to exactly 1.0 in float64


def _splats(colors, logits, mean=(8.0, 8.0), mlp=None, depths=None):
    m = len(colors)
    depths = np.arange(1.0, m + 1.0) if depths is None else np.asarray(depths, dtype=np.float64)
    return SplatBatch(
        index=np.arange(m), depth=depths, mean2d=np.tile(np.float64(mean), (m, 1)),
        conic=np.tile([1.0, 0.0, 1.0], (m, 1)), logit=np.asarray(logits, dtype=np.float64),
        color=np.asarray(colors, dtype=np.float64),
        xcam=np.column_stack([np.zeros(m), np.zeros(m), depths]),
        A=np.tile(np.eye(3).ravel(), (m, 1)), mlp=mlp, radius=np.full(m, 3.0),
    )


def _bias_mlp(m, rgb):
    mlp = np.zeros((m, 32))
    mlp[:, 28:31] = rgb
    return mlp


# -- project ---------------------------------------------------------------------


def test_on_axis_mean_projects_to_principal_point():
    cam = Camera(np.eye(3), np.zeros(3), 100, 100, 32, 32, 64, 64)
    s = project(Gaussian([0, 0, 5], [1, 0, 0, 0], [0.1] * 3, 0.5, [0, 0, 0]), cam)
    np.testing.assert_allclose(s.mean2d, [32, 32], atol=1e-12)
    assert s.view_depth == pytest.approx(5.0)


def test_isotropic_covariance_scales_with_focal_over_depth():
    cam = Camera(np.eye(3), np.zeros(3), 100, 100, 32, 32, 64, 64)
    sigma, z = 0.2, 5.0
    s = project(Gaussian([0, 0, z], [1, 0, 0, 0], [sigma] * 3, 0.5, [0, 0, 0]), cam)
    expect = (100 * sigma / z) ** 2 + COV2D_FLOOR
    np.testing.assert_allclose(s.cov2d, expect * np.eye(2), rtol=1e-6, atol=1e-9)


def test_gaussian_behind_camera_is_culled():
    cam = Camera(np.eye(3), np.zeros(3), 100, 100, 32, 32, 64, 64)
    assert project(Gaussian([0, 0, -5], [1, 0, 0, 0], [0.1] * 3, 0.5, [0, 0, 0]), cam) is None


def test_gaussian_far_outside_frame_is_culled():
    cam = Camera(np.eye(3), np.zeros(3), 100, 100, 32, 32, 64, 64)
    assert project(Gaussian([10, 0, 5], [1, 0, 0, 0], [0.01] * 3, 0.5, [0, 0, 0]), cam) is None


# -- intersect_depth ---------------------------------------------------------------


def test_ray_through_center_peaks_at_center_distance():
    q = np.array([0.3, 0.5, -0.2, 0.7])
    assert intersect_depth([0, 0, 0], [0, 0, 1], [0, 0, 5], q / np.linalg.norm(q), [0.2, 0.5, 1.0]) \
        == pytest.approx(5.0, abs=1e-12)


def test_gaussian_at_ray_origin_gives_zero():
    assert intersect_depth([1, 2, 3], [0, 1, 0], [1, 2, 3], [1, 0, 0, 0], [0.3, 0.3, 0.3]) == 0.0


def test_isotropic_offset_peaks_at_perpendicular_foot():
    assert intersect_depth([0, 0, 0], [1, 0, 0], [3, 2, 0], [1, 0, 0, 0], [0.4] * 3) \
        == pytest.approx(3.0, abs=1e-12)


def test_gaussian_behind_ray_clamps_to_zero():
    assert intersect_depth([0, 0, 0], [0, 0, 1], [0, 0, -4], [1, 0, 0, 0], [0.5] * 3) == 0.0


def test_unnormalized_direction_rejected():
    with pytest.raises(ValueError, match="normalized"):
        intersect_depth([0, 0, 0], [0, 0, 2], [0, 0, 1], [1, 0, 0, 0], [1, 1, 1])


# -- composite ---------------------------------------------------------------------


def test_single_opaque_splat_with_color_delta(cam16):
    out = composite(_splats([[0.2, 0.3, 0.4]], [OPAQUE], mlp=_bias_mlp(1, 0.1)), cam16, 0.5,
                    background=np.zeros(3))
    np.testing.assert_allclose(out.image[8, 8], [0.3, 0.4, 0.5], atol=1e-12)
    assert out.alpha[8, 8] == 1.0


def test_two_half_splats_chain(cam16):
    # logit 0 gives sigmoid 0.5 and the falloff is 1 at the shared center pixel
    out = composite(_splats([[1, 0, 0], [0, 1, 0]], [0.0, 0.0]), cam16, 0.0, background=np.zeros(3))
    np.testing.assert_allclose(out.image[8, 8], [0.5, 0.25, 0.0], atol=1e-15)
    assert out.transmittance[8, 8] == 0.25


def test_no_splats_renders_background(cam16):
    out = composite(_splats(np.zeros((0, 3)), []), cam16, 0.0, background=np.zeros(3))
    np.testing.assert_array_equal(out.image, 0.0)
    np.testing.assert_array_equal(out.alpha, 0.0)


def test_opaque_front_splat_hides_the_rest(cam16):
    out = composite(_splats([[0.9, 0.1, 0.1], [0.0, 0.0, 1.0]], [OPAQUE, OPAQUE]), cam16, 0.0,
                    background=np.ones(3))
    np.testing.assert_allclose(out.image[8, 8], [0.9, 0.1, 0.1], atol=1e-12)
    assert out.n_contrib[8, 8] == 1


def test_unsorted_splats_rejected(cam16):
    with pytest.raises(ValueError, match="depth inversion"):
        composite(_splats([[1, 0, 0], [0, 1, 0]], [0, 0], depths=[2.0, 1.0]), cam16, 0.0, background=np.zeros(3))


def test_equal_depth_tie_needs_increasing_index():
    check_sorted(np.array([1.0, 1.0]), np.array([0, 1]))
    with pytest.raises(ValueError):
        check_sorted(np.array([1.0, 1.0]), np.array([1, 0]))


# -- composite_backward --------------------------------------------------------------


def test_zero_upstream_gives_exactly_zero_gradients():
    rng = np.random.default_rng(0)
    s = random_scene(0, n=6, mlp=mlp_init_batch(6, 0))
    out = render_scene(s, s.cameras[0], 0.4)
    for key, g in composite_backward(out, np.zeros_like(out.image)).items():
        assert np.all(g == 0.0), key
    p = GaussianParams.from_set(s.gaussians)
    out = render_params(p, s.cameras[0], 0.4, background=rng.random(3), deformation=s.deformation)
    for key, g in render_backward(out, np.zeros_like(out.image)).items():
        if g is not None:
            assert np.all(g == 0.0), key


def test_red_channel_loss_passes_through_to_red_color(cam16):
    out = composite(_splats([[0.2, 0.3, 0.4]], [OPAQUE]), cam16, 0.0, background=np.zeros(3))
    up = np.zeros_like(out.image)
    up[8, 8, 0] = 1.0
    g = composite_backward(out, up)
    np.testing.assert_allclose(g["color"][0], [1.0, 0.0, 0.0], atol=1e-15)


def test_backward_requires_forward_state(cam16):
    out = composite(_splats([[0.2, 0.3, 0.4]], [0.0]), cam16, 0.0, background=np.zeros(3))
    out.ctx.clear()
    with pytest.raises(ValueError, match="forward state"):
        composite_backward(out, np.zeros_like(out.image))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_central_differences(seed):
    err, checked = check_rasterizer(seed)
    assert checked > 0
    assert err < 1e-3


# -- invariants ----------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.booleans())
def test_alpha_plus_transmittance_is_one(seed, t, mlp):
    n = 8
    s = random_scene(seed, n=n, mlp=mlp_init_batch(n, seed) if mlp else None, deform_noise=0.02)
    out = render_scene(s, s.cameras[0], t)
    assert np.max(np.abs(out.alpha + out.transmittance - 1.0)) <= 1e-6
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))
    assert np.all(np.isfinite(out.image))


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_zero_initialized_mlps_leave_render_unchanged(seed, t):
    s = random_scene(seed, n=8, mlp=mlp_init_batch(8, seed), deform_noise=0.02)
    cam = s.cameras[0]
    assert np.array_equal(render_scene(s, cam, t, use_mlp=True).image, render_scene(s, cam, t, use_mlp=False).image)


def test_equal_depth_equal_alpha_permutation_invariance(cam16):
    # identical alpha at every pixel: the two orders differ only by which color gets weight 0.5 vs 0.25
    colors = np.array([[0.6, 0.2, 0.1], [0.6, 0.2, 0.1]])
    a = composite(_splats(colors, [0.3, 0.3], depths=[2.0, 2.0]), cam16, 0.0, background=np.zeros(3))
    swapped = _splats(colors[::-1], [0.3, 0.3], depths=[2.0, 2.0])
    b = composite(swapped, cam16, 0.0, background=np.zeros(3))
    np.testing.assert_array_equal(a.image, b.image)


def test_tile_size_only_changes_the_truncated_tail():
    # splats are dropped from tiles beyond their 3-sigma box, so a different tiling can only
    # differ by falloff below exp(-4.5) per splat
    s = random_scene(5, n=8, mlp=mlp_init_batch(8, 5))
    s.gaussians.mlp[:, 28:] = 0.05
    cam = look_at([0, 0, -3], np.zeros(3), fx=30, fy=30, width=40, height=24)
    a = render_scene(s, cam, 0.3, tile=16).image
    b = render_scene(s, cam, 0.3, tile=8).image
    assert np.max(np.abs(a - b)) < 8 * np.exp(-4.5)
    assert np.median(np.abs(a - b)) == 0.0


# -- trajectories --------------------------------------------------------------------


def test_single_pose_trajectory_matches_composite():
    s = random_scene(2)
    frames = render_trajectory(s, [s.cameras[0]], [0.3])
    assert len(frames) == 1
    np.testing.assert_array_equal(frames[0], render_scene(s, s.cameras[0], 0.3).image)


def test_helix_generator_spans_full_turn():
    cams, az = helix_poses([0, 0, 0], 4.0, 1.0, 300, fx=40, fy=40, width=32, height=32)
    assert len(cams) == 300
    assert az[-1] - az[0] == pytest.approx(2 * np.pi, abs=1e-12)
    np.testing.assert_allclose(cams[0].center, cams[-1].center, atol=1e-9)


def test_static_scene_static_camera_gives_identical_frames():
    s = random_scene(4)
    s = Scene(s.gaussians, DeformationField.zeros(), s.cameras, s.background)
    frames = render_trajectory(s, [s.cameras[0]] * 10, np.linspace(0, 1, 10))
    for f in frames[1:]:
        np.testing.assert_array_equal(f, frames[0])


def test_trajectory_rejects_empty_and_mismatched_lists():
    s = random_scene(0)
    with pytest.raises(ValueError):
        render_trajectory(s, [], [])
    with pytest.raises(ValueError, match="times"):
        render_trajectory(s, [s.cameras[0]], [0.1, 0.2])


def test_helix_spec_parses_text_config():
    spec = HelixSpec.from_text("center = 0 0.5 0\nradius = 3\nturns = 2\nn = 12\nwidth = 24\nheight = 16\n")
    cams, times = helix_trajectory(spec)
    assert len(cams) == 12 and cams[0].width == 24 and cams[0].height == 16
    assert times[0] == 0.0 and times[-1] == 1.0
    with pytest.raises(ValueError, match="unknown"):
        HelixSpec.from_text("colour = red\n")
