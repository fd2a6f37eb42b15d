import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check, random_scene, small_camera
from splatattack.core_math import SH_C0
from splatattack.errors import ContractError
from splatattack.renderer import GROUPS, ALPHA_MIN, RenderOptions, rasterize, render, render_with_gradients
from splatattack.scene import Scene


def flat_color_splat(rgb, logit, log_scale=3.0, pos=(0.0, 0.0, 0.0)):
    sh = np.zeros((1, 16, 3))
    sh[0, 0] = (np.asarray(rgb) - 0.5) / SH_C0
    return Scene(np.array([pos], dtype=float), sh, np.full((1, 3), log_scale), np.array([[1.0, 0, 0, 0]]),
                 np.array([logit], dtype=float))


def concat(*scenes):
    return Scene(*(np.concatenate([getattr(s, f) for s in scenes])
                   for f in ("positions", "sh", "log_scales", "rotations", "opacity_logits")))


def test_empty_scene_is_black():
    img = render(Scene.empty(), small_camera())
    assert img.shape == (8, 8, 3) and not img.any()


def test_opaque_gray_splat_covers_frame():
    img = render(flat_color_splat((0.5, 0.5, 0.5), 20.0, log_scale=5.0), small_camera())
    assert np.abs(img - 0.5).max() < 1.0 / 255


def test_two_half_transparent_splats_composite_front_to_back():
    front, back = (0.9, 0.2, 0.4), (0.1, 0.6, 1.0)
    # coincident: the depth tie goes to the lower index, so index 0 is in front
    s = concat(flat_color_splat(front, 0.0, 6.0), flat_color_splat(back, 0.0, 6.0))
    img = render(s, small_camera())
    expect = 0.5 * np.array(front) + 0.25 * np.array(back)
    assert np.abs(img - expect).max() < 1e-5


def test_background_shows_through_remaining_transmittance():
    s = flat_color_splat((0.0, 0.0, 0.0), 0.0, 6.0)
    img = render(s, small_camera(), background=(1.0, 0.0, 0.5))
    assert np.abs(img - np.array([0.5, 0.0, 0.25])).max() < 1e-5


def test_behind_camera_splat_is_culled_not_fatal():
    cam = small_camera(eye=(3.0, 0.0, 0.0))
    res = rasterize(flat_color_splat((1, 1, 1), 5.0, pos=(6.0, 0.0, 0.0)), cam)
    assert res.stats.culled == 1 and not res.image.any()


def test_faint_splat_below_alpha_floor_is_skipped():
    logit = np.log(ALPHA_MIN * 0.9 / (1 - ALPHA_MIN * 0.9))
    img = render(flat_color_splat((1, 1, 1), logit, 5.0), small_camera())
    assert not img.any()


def test_all_entry_points_produce_the_same_image(rng):
    s = random_scene(rng, 6)
    cam = small_camera()
    a = render(s, cam)
    assert np.array_equal(a, rasterize(s, cam).image)
    assert np.array_equal(a, render_with_gradients(s, cam, rng.normal(size=a.shape)).image)


def test_zero_adjoint_gives_zero_gradients(rng):
    s = random_scene(rng, 5)
    g = render_with_gradients(s, small_camera(), np.zeros((8, 8, 3))).grads
    assert all(not g.group(name).any() for name in GROUPS)


def test_mask_and_group_flags_zero_everything_else(rng):
    s = random_scene(rng, 5)
    cam = small_camera()
    adj = rng.normal(size=(8, 8, 3))
    full = render_with_gradients(s, cam, adj).grads
    part = render_with_gradients(s, cam, adj, mask=[0, 1, 3, 4], groups=("sh", "rotation")).grads
    for name in GROUPS:
        arr = part.group(name)
        assert not arr[2].any()
        if name in ("sh", "rotation"):
            assert np.array_equal(arr[[0, 1, 3, 4]], full.group(name)[[0, 1, 3, 4]])
        else:
            assert not arr.any()


def test_gradient_shapes_match_scene(rng):
    s = random_scene(rng, 4)
    g = render_with_gradients(s, small_camera(), np.ones((8, 8, 3))).grads
    assert g.d_position.shape == s.positions.shape
    assert g.d_sh.shape == s.sh.shape
    assert g.d_log_scales.shape == s.log_scales.shape
    assert g.d_rotation.shape == s.rotations.shape
    assert g.d_opacity_logit.shape == s.opacity_logits.shape


def test_adjoint_shape_mismatch_is_contract_error(rng):
    with pytest.raises(ContractError):
        render_with_gradients(random_scene(rng, 2), small_camera(), np.zeros((8, 7, 3)))


def test_five_splat_sh_and_opacity_match_finite_differences():
    rng = np.random.default_rng(77)
    s = random_scene(rng, 5)
    cam = small_camera()
    result = fd_check(s, cam, rng.normal(size=(8, 8, 3)), groups=("sh", "opacity_logit"))
    for group, (checked, _skipped, worst) in result.items():
        assert checked > 0, group
        assert worst < 1e-3, (group, worst)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_every_group_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, 4)
    result = fd_check(s, small_camera(eye=(2.2, -1.4, 1.0)), rng.normal(size=(8, 8, 3)))
    for group, (checked, _skipped, worst) in result.items():
        assert checked > 0, group
        assert worst < 1e-3, (group, worst)


def test_gradients_linear_in_adjoint(rng):
    s = random_scene(rng, 6)
    cam = small_camera()
    a1, a2 = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
    g1 = render_with_gradients(s, cam, a1).grads
    g2 = render_with_gradients(s, cam, a2).grads
    g = render_with_gradients(s, cam, 2.5 * a1 - 0.75 * a2).grads
    for name in GROUPS:
        lhs, rhs = g.group(name), 2.5 * g1.group(name) - 0.75 * g2.group(name)
        scale = max(np.abs(rhs).max(), 1e-300)
        assert np.abs(lhs - rhs).max() <= 1e-9 * scale


def test_bit_identical_across_runs_and_thread_counts():
    rng = np.random.default_rng(5)
    s = random_scene(rng, 40)
    cam = small_camera(size=37)  # rows do not divide evenly into blocks
    adj = rng.normal(size=(37, 37, 3))
    ref = render_with_gradients(s, cam, adj, threads=1)
    for threads in (1, 3, 8):
        out = render_with_gradients(s, cam, adj, threads=threads)
        assert np.array_equal(out.image, ref.image)
        for name in GROUPS:
            assert np.array_equal(out.grads.group(name), ref.grads.group(name))
        assert np.array_equal(render(s, cam, RenderOptions(threads=threads)), ref.image)


def _depths(scene, cam):
    r, t = cam.world_to_camera[:3, :3], cam.world_to_camera[:3, 3]
    return (scene.positions @ r.T + t)[:, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 4.0))
def test_raising_front_opacity_never_raises_weight_behind(seed, bump):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, 4)
    s.sh[:, 1:] = 0.0
    cam = small_camera()
    depth = _depths(s, cam)
    front = int(np.argmin(depth))
    for behind in np.flatnonzero(depth > depth[front]):
        # a white splat among black ones renders exactly its compositing weight
        probe = s.copy()
        probe.sh[:, 0] = -0.5 / SH_C0
        probe.sh[behind, 0] = 0.5 / SH_C0
        before = render(probe, cam)
        probe.opacity_logits[front] += bump
        after = render(probe, cam)
        assert np.all(after <= before + 1e-15)


def test_view_dependent_color_follows_camera_direction():
    sh = np.zeros((1, 16, 3))
    sh[0, 3, 1] = 1.0  # x-linear band, green
    s = Scene(np.zeros((1, 3)), sh, np.full((1, 3), 3.0), np.array([[1.0, 0, 0, 0]]), np.array([20.0]))
    plus = render(s, small_camera(eye=(3.0, 0, 0)))[4, 4, 1]
    minus = render(s, small_camera(eye=(-3.0, 0, 0)))[4, 4, 1]
    assert plus > 0.5 > minus
