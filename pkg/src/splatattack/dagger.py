"""Projected-gradient attack directly on splat parameters.

The attacked parameters (selected splats x selected groups) are flattened
into one raw-space vector and updated by

    theta <- project(theta +/- step * direction)

where ``direction`` is the raw gradient under an L2 budget and its sign under
Linf, the sign is ``+`` for untargeted attacks (ascend the true-label loss)
and ``-`` for targeted ones (descend the target-label loss), and ``project``
maps back onto the budget ball around the starting point. The gradient is
the mean over attacked views of the renderer's reverse pass seeded with the
victim's pixel adjoint.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, ContractError
from .renderer import GROUPS, RenderOptions, SceneGradients, render, render_with_gradients
from .scene import Camera, Scene
from .victim import VictimModel

_SCENE_FIELD = {
    "position": "positions",
    "sh": "sh",
    "log_scales": "log_scales",
    "rotation": "rotations",
    "opacity_logit": "opacity_logits",
}


def project_to_ball(theta, theta0, norm: str, epsilon: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta.shape != theta0.shape:
        raise ContractError(f"theta shape {theta.shape} != theta0 shape {theta0.shape}")
    delta = theta - theta0
    if norm == "linf":
        clipped = np.clip(delta, -epsilon, epsilon)
        if np.array_equal(clipped, delta):
            return theta.copy()
        projected = theta0 + clipped
        # theta0 + epsilon can round to a point just outside; step those back one ulp at a time.
        outside = np.abs(projected - theta0) > epsilon
        while outside.any():
            projected[outside] = np.nextafter(projected[outside], theta0[outside])
            outside = np.abs(projected - theta0) > epsilon
        return projected
    if norm == "l2":
        length = float(np.sqrt(np.sum(delta * delta)))
        if length <= epsilon:
            return theta.copy()
        projected = theta0 + delta * (epsilon / length)
        # Same rounding issue; shrink the offset until projecting again is a no-op.
        shrink = 2.0**-52
        while True:
            d = projected - theta0
            if float(np.sqrt(np.sum(d * d))) <= epsilon:
                return projected
            projected = theta0 + d * (1.0 - shrink)
            shrink *= 4.0
    raise ConfigError(f"norm must be 'l2' or 'linf', got {norm!r}")


def constraint_norm(theta, theta0, norm: str) -> float:
    delta = np.asarray(theta) - np.asarray(theta0)
    if norm == "linf":
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    return float(np.sqrt(np.sum(delta * delta)))


@dataclass(frozen=True)
class ThetaLayout:
    """Where each slice of the flat vector lives: splat indices, groups in fixed order."""

    indices: np.ndarray
    groups: tuple[str, ...]
    sizes: tuple[int, ...]  # scalars per splat, per group

    @property
    def length(self) -> int:
        return len(self.indices) * sum(self.sizes)


def _ordered_groups(groups) -> tuple[str, ...]:
    chosen = set(groups)
    unknown = chosen - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
    if not chosen:
        raise ConfigError("at least one parameter group must be flagged")
    return tuple(g for g in GROUPS if g in chosen)


def flatten_theta(scene: Scene, mask, groups) -> tuple[np.ndarray, ThetaLayout]:
    """Splat index ascending, then groups in ``GROUPS`` order, then C order within a field."""
    indices = np.unique(np.asarray(list(mask) if not isinstance(mask, np.ndarray) else mask, dtype=np.int64))
    if indices.size == 0:
        raise ConfigError("empty selection: mask has no splats")
    if indices[0] < 0 or indices[-1] >= len(scene):
        raise ContractError("mask index out of range")
    order = _ordered_groups(groups)
    blocks, sizes = [], []
    for g in order:
        arr = getattr(scene, _SCENE_FIELD[g])[indices].reshape(len(indices), -1)
        blocks.append(arr)
        sizes.append(arr.shape[1])
    theta = np.concatenate(blocks, axis=1).ravel()
    return theta, ThetaLayout(indices, order, tuple(sizes))


def flatten_gradients(grads: SceneGradients, layout: ThetaLayout) -> np.ndarray:
    blocks = [grads.group(g)[layout.indices].reshape(len(layout.indices), -1) for g in layout.groups]
    return np.concatenate(blocks, axis=1).ravel()


def unflatten_theta(scene: Scene, theta: np.ndarray, layout: ThetaLayout) -> Scene:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (layout.length,):
        raise ContractError(f"theta length {theta.shape} != layout length {layout.length}")
    out = scene.copy()
    table = theta.reshape(len(layout.indices), -1)
    col = 0
    for g, size in zip(layout.groups, layout.sizes):
        target = getattr(out, _SCENE_FIELD[g])
        target[layout.indices] = table[:, col:col + size].reshape((len(layout.indices),) + target.shape[1:])
        col += size
    return out


def composite_views(scene_a: Scene, scene_b: Scene) -> Scene:
    """Concatenate background ``scene_a`` and target ``scene_b``; the mask marks ``scene_b``'s splats."""
    na, nb = len(scene_a), len(scene_b)
    out = Scene(
        np.concatenate([scene_a.positions, scene_b.positions]),
        np.concatenate([scene_a.sh, scene_b.sh]),
        np.concatenate([scene_a.log_scales, scene_b.log_scales]),
        np.concatenate([scene_a.rotations, scene_b.rotations]),
        np.concatenate([scene_a.opacity_logits, scene_b.opacity_logits]),
        target_mask=np.arange(na, na + nb),
    )
    return out


@dataclass
class AttackBudget:
    norm: str = "l2"
    epsilon: float = 5.0
    steps: int = 50
    step_size: float | str = "auto"
    groups: tuple[str, ...] = ("sh",)
    mode: str = "targeted"
    label: str = ""  # target label (targeted) or true label (untargeted)
    random_start: bool = False

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.mode not in ("targeted", "untargeted"):
            raise ConfigError(f"mode must be targeted or untargeted, got {self.mode!r}")
        if not (self.step_size == "auto" or (isinstance(self.step_size, (int, float)) and self.step_size > 0)):
            raise ConfigError("step_size must be 'auto' or a positive number")
        self.groups = _ordered_groups(self.groups)

    @property
    def eta(self) -> float:
        if self.step_size == "auto":
            return self.epsilon * 2.0 / self.steps if self.steps > 0 else 0.0
        return float(self.step_size)

    def to_dict(self) -> dict:
        return {
            "norm": self.norm, "epsilon": self.epsilon, "steps": self.steps,
            "step_size": self.step_size, "groups": list(self.groups), "mode": self.mode,
            "label": self.label, "random_start": self.random_start,
        }


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    constraint_norm: float
    top1: tuple[tuple[str, float], ...]  # per attacked view


@dataclass
class AttackTrace:
    records: list[TraceRecord] = field(default_factory=list)
    view_ids: tuple[str, ...] = ()
    best_iteration: int = 0

    def first_success(self, label: str) -> int | None:
        """First iteration at which ``label`` is top-1 on every attacked view."""
        for r in self.records:
            if all(lb == label for lb, _ in r.top1):
                return r.iteration
        return None

    def first_evasion(self, label: str) -> int | None:
        for r in self.records:
            if all(lb != label for lb, _ in r.top1):
                return r.iteration
        return None

    @property
    def max_constraint_norm(self) -> float:
        return max((r.constraint_norm for r in self.records), default=0.0)

    def write(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            head = ["iter", "loss", "constraint_norm", "best"]
            for vid in self.view_ids:
                head += [f"{vid}:label", f"{vid}:score"]
            writer.writerow(head)
            for r in self.records:
                row = [r.iteration, repr(r.loss), repr(r.constraint_norm), int(r.iteration == self.best_iteration)]
                for lb, sc in r.top1:
                    row += [lb, repr(sc)]
                writer.writerow(row)
        return path


@dataclass
class AttackResult:
    attacked_scene: Scene
    trace: AttackTrace
    theta0: np.ndarray
    theta: np.ndarray
    layout: ThetaLayout


def _victim_pass(scene, cameras, victim, label, opts, with_grad, mask, groups, layout):
    losses, tops = [], []
    grad = np.zeros(layout.length) if with_grad else None
    for cam in cameras:  # fixed view order
        image = render(scene, cam, opts)
        loss, adjoint = victim.loss_and_pixel_gradient(image, label)
        losses.append(loss)
        tops.append(victim.score(image).top1)
        if with_grad:
            g = render_with_gradients(scene, cam, adjoint, mask=mask, groups=groups, options=opts).grads
            grad += flatten_gradients(g, layout)
    if with_grad:
        grad /= len(cameras)
    return float(np.mean(losses)), tuple(tops), grad


def pgd_attack(scene: Scene, mask, cameras: Sequence[Camera], victim: VictimModel, budget: AttackBudget,
               rng_seed: int = 0, options: RenderOptions | None = None) -> AttackResult:
    """Run ``budget.steps`` projected steps; returns the last iterate plus a per-step trace.

    Record 0 is the unperturbed scene; record ``t`` is the state after step ``t``.
    """
    if not getattr(victim, "differentiable", False):
        raise CapabilityError("pgd_attack needs a differentiable victim; black-box scorers are evaluation-only")
    if not cameras:
        raise ConfigError("pgd_attack needs at least one attacked view")
    if not budget.label:
        raise ConfigError("budget.label must name the target (targeted) or true (untargeted) label")
    victim.label_index(budget.label)
    opts = options or RenderOptions()
    theta0, layout = flatten_theta(scene, mask, budget.groups)
    theta = theta0.copy()
    if budget.random_start and budget.steps > 0:
        rng = np.random.default_rng(rng_seed)
        if budget.norm == "linf":
            theta = theta0 + rng.uniform(-budget.epsilon, budget.epsilon, theta0.shape)
        else:
            d = rng.normal(size=theta0.shape)
            radius = budget.epsilon * rng.random() ** (1.0 / d.size)
            theta = theta0 + d * (radius / np.linalg.norm(d))
        theta = project_to_ball(theta, theta0, budget.norm, budget.epsilon)
    sign = 1.0 if budget.mode == "untargeted" else -1.0
    eta = budget.eta
    view_ids = tuple(c.pose_id for c in cameras)
    trace = AttackTrace(view_ids=view_ids)
    current = unflatten_theta(scene, theta, layout) if budget.steps > 0 else scene.copy()
    best = None
    for it in range(budget.steps + 1):
        want_grad = it < budget.steps
        loss, tops, grad = _victim_pass(current, cameras, victim, budget.label, opts, want_grad,
                                        layout.indices, budget.groups, layout)
        trace.records.append(TraceRecord(it, loss, constraint_norm(theta, theta0, budget.norm), tops))
        score = sign * loss
        if best is None or score > best:
            best = score
            trace.best_iteration = it
        if not want_grad:
            break
        direction = np.sign(grad) if budget.norm == "linf" else grad
        theta = project_to_ball(theta + sign * eta * direction, theta0, budget.norm, budget.epsilon)
        current = unflatten_theta(scene, theta, layout)
    return AttackResult(current, trace, theta0, theta, layout)


def write_run_config(path, budget: AttackBudget, seed: int, extra: dict | None = None) -> None:
    doc = {"budget": budget.to_dict(), "seed": seed, **(extra or {})}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
