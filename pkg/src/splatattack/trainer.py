"""Photometric fitting of a fixed-size splat scene to posed images.

One view per optimizer step; views cycle through a fresh seeded permutation
every epoch. Parameters are updated with per-group Adam and constant
learning rates. There is no densification, splitting or pruning, so the
splat count and order never change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .images import load_float_dump, load_png, save_float_dump, save_png
from .renderer import GROUPS, RenderOptions, render, render_with_gradients
from .scene import Camera, Scene, load_cameras, save_cameras

DEFAULT_LR = {
    "position": 1.6e-4,
    "sh": 2.5e-3,
    "opacity_logit": 5e-2,
    "log_scales": 5e-3,
    "rotation": 1e-3,
}

_SCENE_FIELD = {
    "position": "positions",
    "sh": "sh",
    "log_scales": "log_scales",
    "rotation": "rotations",
    "opacity_logit": "opacity_logits",
}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    loss: str = "l2"
    sh_warmup: int = 100
    rng_seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        self.lr = {**DEFAULT_LR, **(self.lr or {})}
        unknown = set(self.lr) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown learning-rate groups {sorted(unknown)}")
        if any(v < 0 for v in self.lr.values()):
            raise ConfigError("learning rates must be >= 0")
        if self.loss not in ("l2", "l1"):
            raise ConfigError(f"loss must be 'l2' or 'l1', got {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "lr": dict(self.lr),
            "loss": self.loss,
            "sh_warmup": self.sh_warmup,
            "rng_seed": self.rng_seed,
            "background": list(self.background),
        }


@dataclass
class Dataset:
    """Posed images plus the targeted pose ids (empty for a clean dataset)."""

    items: list[tuple[np.ndarray, Camera]]
    targeted_pose_ids: frozenset[str] = frozenset()
    zones: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.targeted_pose_ids = frozenset(self.targeted_pose_ids)
        ids = self.pose_ids
        if len(set(ids)) != len(ids):
            raise ValidationError("dataset pose ids must be unique")
        for image, cam in self.items:
            if image.shape != (cam.height, cam.width, 3):
                raise ValidationError(f"image for {cam.pose_id} has shape {image.shape}, camera wants "
                                      f"{(cam.height, cam.width, 3)}")
        missing = self.targeted_pose_ids - set(ids)
        if missing:
            raise ValidationError(f"targeted pose ids not in dataset: {sorted(missing)}")

    @property
    def pose_ids(self) -> list[str]:
        return [cam.pose_id for _, cam in self.items]

    @property
    def cameras(self) -> list[Camera]:
        return [cam for _, cam in self.items]

    def image(self, pose_id: str) -> np.ndarray:
        for image, cam in self.items:
            if cam.pose_id == pose_id:
                return image
        raise KeyError(pose_id)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class FitResult:
    scene: Scene
    loss_trace: np.ndarray


def photometric_loss(image: np.ndarray, target: np.ndarray, kind: str = "l2") -> tuple[float, np.ndarray]:
    """Mean per-pixel-per-channel loss and its gradient w.r.t. ``image``."""
    diff = image - target
    count = diff.size
    if kind == "l2":
        return float(np.mean(diff * diff)), 2.0 * diff / count
    return float(np.mean(np.abs(diff))), np.sign(diff) / count


def dataset_loss(scene: Scene, data: Dataset, cfg: FitConfig | None = None) -> float:
    cfg = cfg or FitConfig(iterations=0)
    opts = RenderOptions(background=tuple(cfg.background), threads=cfg.threads)
    losses = [photometric_loss(render(scene, cam, opts), img, cfg.loss)[0] for img, cam in data.items]
    return float(np.mean(losses)) if losses else 0.0


def fit_scene(initial: Scene, data: Dataset, cfg: FitConfig) -> FitResult:
    if cfg.iterations > 0 and len(data) == 0:
        raise ConfigError("cannot fit to an empty dataset")
    scene = initial.copy()
    trace = np.zeros(cfg.iterations)
    if cfg.iterations == 0:
        return FitResult(scene, trace)

    moments = {g: (np.zeros_like(getattr(scene, f)), np.zeros_like(getattr(scene, f)))
               for g, f in _SCENE_FIELD.items()}
    rng = np.random.default_rng(cfg.rng_seed)
    order = rng.permutation(len(data))
    background = tuple(cfg.background)
    for it in range(cfg.iterations):
        slot = it % len(data)
        if slot == 0 and it > 0:
            order = rng.permutation(len(data))
        target, cam = data.items[order[slot]]
        degree = 0 if it < cfg.sh_warmup else None
        opts = RenderOptions(background=background, sh_degree=degree, threads=cfg.threads)
        image = render(scene, cam, opts)
        loss, adjoint = photometric_loss(image, target, cfg.loss)
        trace[it] = loss
        grads = render_with_gradients(scene, cam, adjoint, options=opts).grads
        step = it + 1
        bc1 = 1.0 - ADAM_BETA1**step
        bc2 = 1.0 - ADAM_BETA2**step
        for g, f in _SCENE_FIELD.items():
            lr = cfg.lr[g]
            if lr == 0.0:
                continue
            grad = grads.group(g)
            m, v = moments[g]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            param = getattr(scene, f)
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return FitResult(scene, trace)


def init_scene_from_box(count: int, box, rng_seed: int) -> Scene:
    """Uniform random isotropic splats inside ``box = (lo, hi)``; zero SH, opacity 0.5."""
    if count <= 0:
        raise ConfigError("count must be positive")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise ConfigError("box must be two finite 3-vectors")
    if np.any(hi <= lo):
        raise ConfigError("degenerate box: every hi coordinate must exceed lo")
    rng = np.random.default_rng(rng_seed)
    positions = lo + rng.random((count, 3)) * (hi - lo)
    diag = float(np.linalg.norm(hi - lo))
    log_scale = np.log(diag / count ** (1.0 / 3.0) / 4.0)
    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return Scene(positions, np.zeros((count, 16, 3)), np.full((count, 3), log_scale), rotations, np.zeros(count))


# --------------------------------------------------------------------------- dataset directories


def save_dataset(data: Dataset, directory, float_dumps: bool = True) -> Path:
    """Write ``images/<pose_id>.png`` (+ ``.f32``), ``cameras.json`` and ``manifest.json``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for image, cam in data.items:
        save_png(image, root / "images" / f"{cam.pose_id}.png")
        if float_dumps:
            save_float_dump(image, root / "images" / f"{cam.pose_id}.f32")
    save_cameras(data.cameras, root / "cameras.json")
    manifest = {
        "pose_ids": data.pose_ids,
        "zones": {pid: data.zones.get(pid, "benign") for pid in data.pose_ids},
        "targeted": {pid: pid in data.targeted_pose_ids for pid in data.pose_ids},
        "targeted_pose_ids": sorted(data.targeted_pose_ids),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    cameras = {c.pose_id: c for c in load_cameras(root / "cameras.json")}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        pose_ids = manifest["pose_ids"]
        targeted = manifest.get("targeted_pose_ids", [])
        zones = manifest.get("zones", {})
    else:
        pose_ids, targeted, zones = list(cameras), [], {}
    items = []
    for pid in pose_ids:
        if pid not in cameras:
            raise ValidationError(f"manifest pose {pid!r} has no camera")
        dump = root / "images" / f"{pid}.f32"
        image = load_float_dump(dump) if dump.exists() else load_png(root / "images" / f"{pid}.png")
        items.append((image, cameras[pid]))
    return Dataset(items, frozenset(targeted), dict(zones))


def views_of(scene: Scene, cameras: Sequence[Camera], options: RenderOptions | None = None) -> Dataset:
    """Render ``scene`` from every camera into a clean dataset."""
    return Dataset([(render(scene, cam, options), cam) for cam in cameras])
