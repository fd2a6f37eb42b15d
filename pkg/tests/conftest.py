from __future__ import annotations

import numpy as np
import pytest

from splatattack.renderer import GROUPS, footprint, render, render_with_gradients
from splatattack.scene import Scene, look_at_camera

FIELD = {
    "position": "positions",
    "sh": "sh",
    "log_scales": "log_scales",
    "rotation": "rotations",
    "opacity_logit": "opacity_logits",
}


def random_scene(rng: np.random.Generator, n: int, sh_scale: float = 0.3) -> Scene:
    return Scene(
        rng.uniform(-0.6, 0.6, (n, 3)),
        rng.normal(0.0, sh_scale, (n, 16, 3)),
        rng.uniform(-2.0, -1.0, (n, 3)),
        rng.normal(0.0, 1.0, (n, 4)),
        rng.normal(0.5, 1.0, n),
    )


def small_camera(pose_id: str = "c", eye=(2.5, 1.0, 1.2), size: int = 8):
    return look_at_camera(pose_id, eye, width=size, height=size, fov_deg=45.0)


def _same(fa, fb) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(fa, fb))


def fd_check(scene: Scene, cam, adjoint, groups=GROUPS, h: float = 1e-4, floor: float = 1e-6):
    """Compare analytic gradients with central differences of <render, adjoint>.

    Coordinates whose +/-h perturbation changes the render's discrete state
    (active pixels, clamp ranges, depth order) straddle a kink and are skipped.
    Returns {group: (checked, skipped, worst relative error)}.
    """
    grads = render_with_gradients(scene, cam, adjoint).grads
    base = footprint(scene, cam)
    out = {}
    for g in groups:
        field = FIELD[g]
        analytic = grads.group(g)
        checked = skipped = 0
        worst = 0.0
        for ix in np.ndindex(getattr(scene, field).shape):
            plus, minus = scene.copy(), scene.copy()
            getattr(plus, field)[ix] += h
            getattr(minus, field)[ix] -= h
            if not (_same(footprint(plus, cam), base) and _same(footprint(minus, cam), base)):
                skipped += 1
                continue
            fd = (np.sum(render(plus, cam) * adjoint) - np.sum(render(minus, cam) * adjoint)) / (2 * h)
            a = analytic[ix]
            if abs(a) > floor:
                checked += 1
                worst = max(worst, abs(fd - a) / max(abs(a), abs(fd)))
            elif abs(fd) > 1e-3:
                # a missed dependence still counts as a failure
                checked += 1
                worst = max(worst, 1.0)
        out[g] = (checked, skipped, worst)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
