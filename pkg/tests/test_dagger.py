import numpy as np
import pytest

from conftest import random_scene, small_camera
from splatattack.commands import desk_composite, desk_dagger_surrogate
from splatattack.core_math import SH_C0
from splatattack.dagger import (
    AttackBudget,
    composite_views,
    constraint_norm,
    flatten_theta,
    pgd_attack,
    project_to_ball,
    unflatten_theta,
)
from splatattack.desk import attack_views
from splatattack.errors import CapabilityError, ConfigError, ContractError
from splatattack.renderer import GROUPS, render
from splatattack.scene import Scene
from splatattack.victim import BlackBoxModel, SurrogateConfig, SurrogateModel

# --- projection


def test_point_inside_ball_returned_unchanged():
    theta0 = np.array([0.3, -1.2, 4.0])
    theta = theta0 + np.array([0.1, 0.2, -0.3])
    for norm in ("l2", "linf"):
        assert np.array_equal(project_to_ball(theta, theta0, norm, 1.0), theta)


def test_l2_offset_of_ten_scaled_by_half():
    theta0 = np.array([1.0, 2.0])
    out = project_to_ball(np.array([7.0, 10.0]), theta0, "l2", 5.0)
    assert np.array_equal(out, [4.0, 6.0])


def test_linf_clamps_each_component():
    out = project_to_ball(np.array([-3.0, 0.1, 7.0]), np.zeros(3), "linf", 2.0)
    assert np.array_equal(out, [-2.0, 0.1, 2.0])


def test_projection_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        project_to_ball(np.zeros(3), np.zeros(4), "l2", 1.0)
    with pytest.raises(ConfigError):
        project_to_ball(np.zeros(3), np.zeros(3), "l1", 1.0)


@pytest.mark.parametrize("norm", ["l2", "linf"])
def test_projection_contracts_and_is_idempotent(norm):
    rng = np.random.default_rng(99 if norm == "l2" else 98)
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        theta0 = rng.normal(0, 10.0 ** rng.uniform(-2, 2), n)
        theta = theta0 + rng.normal(0, 10.0 ** rng.uniform(-3, 3), n)
        eps = 10.0 ** rng.uniform(-3, 2)
        p = project_to_ball(theta, theta0, norm, eps)
        assert constraint_norm(p, theta0, norm) <= min(constraint_norm(theta, theta0, norm), eps * (1 + 1e-12))
        assert np.array_equal(project_to_ball(p, theta0, norm, eps), p)


# --- parameter vector


def test_two_splats_sh_only_is_96_long(rng):
    theta, layout = flatten_theta(random_scene(rng, 4), [3, 1], ["sh"])
    assert theta.shape == (96,) and layout.indices.tolist() == [1, 3]


def test_five_splats_opacity_only_is_5_long(rng):
    theta, _ = flatten_theta(random_scene(rng, 7), range(5), ["opacity_logit"])
    assert theta.shape == (5,)


def test_flatten_then_unflatten_round_trips(rng):
    s = random_scene(rng, 6)
    theta, layout = flatten_theta(s, [0, 2, 5], GROUPS)
    assert layout.length == 3 * (3 + 48 + 3 + 4 + 1)
    assert unflatten_theta(s, theta, layout).equals(s)


def test_group_order_is_fixed_regardless_of_request_order(rng):
    s = random_scene(rng, 3)
    a, _ = flatten_theta(s, [1], ["opacity_logit", "position"])
    b, _ = flatten_theta(s, [1], ["position", "opacity_logit"])
    assert np.array_equal(a, b) and np.array_equal(a[:3], s.positions[1])


def test_empty_selection_is_config_error(rng):
    with pytest.raises(ConfigError):
        flatten_theta(random_scene(rng, 3), [], ["sh"])
    with pytest.raises(ConfigError):
        flatten_theta(random_scene(rng, 3), [0], [])


# --- composite


def wall_and_hidden():
    def one(pos, rgb, log_scale, logit=20.0):
        sh = np.zeros((1, 16, 3))
        sh[0, 0] = (np.asarray(rgb) - 0.5) / SH_C0
        return Scene(np.array([pos]), sh, np.full((1, 3), log_scale), np.array([[1.0, 0, 0, 0]]), np.array([logit]))
    return one((1.0, 0.0, 0.0), (0.2, 0.4, 0.9), 5.0), one((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), -1.0)


def test_composite_with_empty_background_masks_everything(rng):
    s = random_scene(rng, 5)
    out = composite_views(Scene.empty(), s)
    assert out.target_mask.tolist() == list(range(5))
    assert np.array_equal(out.sh, s.sh) and np.array_equal(out.positions, s.positions)


def test_composite_counts_add(rng):
    a, b = random_scene(rng, 3), random_scene(rng, 4)
    out = composite_views(a, b)
    assert len(out) == 7 and out.target_mask.tolist() == [3, 4, 5, 6]


def test_fully_occluded_target_leaves_render_unchanged():
    wall, hidden = wall_and_hidden()
    cam = small_camera(eye=(3.0, 0.0, 0.0), size=16)
    assert np.abs(render(composite_views(wall, hidden), cam) - render(wall, cam)).max() <= 1.0 / 255
    assert np.abs(render(hidden, cam)).max() > 0.1  # it would be visible on its own


# --- attack loop


class QuadraticVictim:
    """Differentiable toy: loss = mean squared distance to a fixed image."""

    differentiable, black_box = True, False

    def __init__(self, target):
        self.target = target
        self.inner = SurrogateModel(["a", "b"])

    def label_index(self, label):
        return self.inner.label_index(label)

    def score(self, image):
        return self.inner.score(image)

    def loss_and_pixel_gradient(self, image, label, mode="targeted"):
        d = image - self.target
        return float(np.mean(d * d)), 2.0 * d / d.size


def test_zero_steps_return_the_input(rng):
    s = random_scene(rng, 4)
    res = pgd_attack(s, [0, 1], [small_camera()], SurrogateModel(["a", "b"]), AttackBudget(steps=0, label="a"))
    assert res.attacked_scene.equals(s)
    assert len(res.trace.records) == 1 and res.trace.records[0].constraint_norm == 0.0


@pytest.mark.parametrize("norm,eps", [("l2", 0.3), ("linf", 0.05)])
def test_every_iterate_stays_inside_budget(rng, norm, eps):
    s = random_scene(rng, 5)
    victim = QuadraticVictim(np.full((8, 8, 3), 0.9))
    budget = AttackBudget(norm=norm, epsilon=eps, steps=12, step_size=0.5, groups=GROUPS, label="a",
                          random_start=True)
    res = pgd_attack(s, [1, 3], [small_camera("v0"), small_camera("v1", eye=(-2.0, 1.5, 1.0))], victim, budget)
    assert res.trace.max_constraint_norm <= eps + 1e-6
    assert constraint_norm(res.theta, res.theta0, norm) <= eps + 1e-6


def test_unmasked_splats_and_unflagged_groups_bit_identical(rng):
    s = random_scene(rng, 6)
    victim = QuadraticVictim(np.zeros((8, 8, 3)))
    budget = AttackBudget(epsilon=1.0, steps=5, groups=("sh", "opacity_logit"), label="a")
    out = pgd_attack(s, [2, 4], [small_camera()], victim, budget).attacked_scene
    keep = [0, 1, 3, 5]
    for name in ("positions", "sh", "log_scales", "rotations", "opacity_logits"):
        assert np.array_equal(getattr(out, name)[keep], getattr(s, name)[keep]), name
    for name in ("positions", "log_scales", "rotations"):
        assert np.array_equal(getattr(out, name), getattr(s, name)), name
    assert not np.array_equal(out.sh[[2, 4]], s.sh[[2, 4]])


def test_targeted_step_descends_a_smooth_loss(rng):
    s = random_scene(rng, 5)
    victim = QuadraticVictim(np.full((8, 8, 3), 0.2))
    res = pgd_attack(s, range(5), [small_camera()], victim,
                     AttackBudget(epsilon=10.0, steps=10, step_size=2.0, label="a"))
    losses = [r.loss for r in res.trace.records]
    assert losses[-1] < losses[0]


def test_auto_step_size():
    assert AttackBudget(epsilon=5.0, steps=50).eta == 5.0 * 2.0 / 50
    assert AttackBudget(epsilon=0.3, steps=7).eta == 0.3 * 2.0 / 7
    assert AttackBudget(steps=4, step_size=0.25).eta == 0.25


@pytest.mark.parametrize("kw", [{"epsilon": 0.0}, {"steps": -1}, {"groups": ()}, {"groups": ("colour",)},
                                {"norm": "l1"}, {"mode": "both"}, {"step_size": -1.0}])
def test_invalid_budgets_rejected(kw):
    with pytest.raises(ConfigError):
        AttackBudget(**kw)


def test_black_box_victim_is_refused(rng, tmp_path):
    with pytest.raises(CapabilityError):
        pgd_attack(random_scene(rng, 2), [0], [small_camera()], BlackBoxModel(["a", "b"], tmp_path),
                   AttackBudget(label="a"))


def test_unknown_label_rejected(rng):
    with pytest.raises(ConfigError):
        pgd_attack(random_scene(rng, 2), [0], [small_camera()], SurrogateModel(["a", "b"]), AttackBudget(label="z"))


def test_same_seed_same_trace(rng):
    s = random_scene(rng, 4)
    victim = QuadraticVictim(np.full((8, 8, 3), 0.7))
    budget = AttackBudget(epsilon=0.5, steps=4, random_start=True, label="a")
    a = pgd_attack(s, [0, 2], [small_camera()], victim, budget, rng_seed=5)
    b = pgd_attack(s, [0, 2], [small_camera()], victim, budget, rng_seed=5)
    assert np.array_equal(a.theta, b.theta) and a.trace.records == b.trace.records


# --- desk fixture


@pytest.fixture(scope="module")
def desk():
    return desk_composite("benign"), desk_dagger_surrogate(SurrogateConfig(seed=0)), attack_views()[0]


def test_desk_surrogate_sees_the_car(desk):
    scene, victim, view = desk
    assert victim.holdout_accuracy >= 0.95
    assert victim.score(render(scene, view)).top1[0] == "car"


def test_desk_targeted_flip_within_fifty_steps(desk):
    scene, victim, view = desk
    res = pgd_attack(scene, scene.target_mask, [view], victim, AttackBudget(label="person"), rng_seed=0)
    hit = res.trace.first_success("person")
    assert hit is not None and hit <= 50
    assert res.trace.max_constraint_norm <= 5.0 + 1e-6
    assert res.trace.records[-1].top1[0][0] == "person"


def test_desk_untargeted_best_iterate_never_below_start(desk):
    scene, victim, view = desk
    res = pgd_attack(scene, scene.target_mask, [view], victim,
                     AttackBudget(label="car", mode="untargeted", epsilon=1.0, steps=6), rng_seed=0)
    losses = [r.loss for r in res.trace.records]
    assert losses[res.trace.best_iteration] >= losses[0]
    assert max(losses) > losses[0]
