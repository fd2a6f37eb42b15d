"""Procedural desk-scale fixtures: a box "car", its textures, a ground patch.

Surfaces are tiled with flat, axis-aligned splats (identity rotation, thin
log-scale along the face normal), so every texture is just a DC color per
splat. All builders are deterministic.
"""

from __future__ import annotations

import numpy as np

from .cloak import SourceObject, ring, hemisphere_cameras
from .core_math import SH_C0
from .scene import Scene

BODY = ((-1.0, -0.5, -0.35), (1.0, 0.5, 0.25))
CABIN = ((-0.45, -0.4, 0.25), (0.55, 0.4, 0.6))
SPACING = 0.2
THIN = np.log(0.02)
GROUND_Z = -0.36


def rgb_to_dc(rgb) -> np.ndarray:
    """SH band-0 coefficients that render as ``rgb`` from every direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def _face_grid(lo, hi, axis: int, side: int, spacing: float):
    """Centers and per-axis half-extents tiling one box face."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    others = [a for a in range(3) if a != axis]
    counts = [max(1, int(round((hi[a] - lo[a]) / spacing))) for a in others]
    steps = [(hi[a] - lo[a]) / c for a, c in zip(others, counts)]
    pts = []
    for i in range(counts[0]):
        for j in range(counts[1]):
            p = np.empty(3)
            p[axis] = hi[axis] if side > 0 else lo[axis]
            p[others[0]] = lo[others[0]] + (i + 0.5) * steps[0]
            p[others[1]] = lo[others[1]] + (j + 0.5) * steps[1]
            pts.append(p)
    scale = np.empty(3)
    scale[axis] = THIN
    scale[others[0]] = np.log(0.6 * steps[0])
    scale[others[1]] = np.log(0.6 * steps[1])
    return np.array(pts), scale


def _box_faces(lo, hi, part: str, skip_bottom=True):
    out = []
    for axis in range(3):
        for side in (-1, 1):
            if axis == 2 and side < 0 and skip_bottom:
                continue
            pts, scale = _face_grid(lo, hi, axis, side, SPACING)
            out.append((pts, scale, part, axis, side))
    return out


def car_object() -> SourceObject:
    """~190-splat car: red body, dark windows on the cabin sides, textures for attacks.

    Textures: ``benign`` (car paint), ``road`` (asphalt with a lane stripe),
    ``checker`` (black/white checkerboard), ``person`` and ``stop``.
    """
    faces = _box_faces(*BODY, "body") + _box_faces(*CABIN, "cabin")
    positions, scales, parts = [], [], []
    for pts, scale, part, axis, side in faces:
        # body top is hidden under the cabin footprint; keep it, it shows around it
        for p in pts:
            positions.append(p)
            scales.append(scale)
            parts.append((part, axis, side))
    positions = np.array(positions)
    n = len(positions)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    base = np.zeros((n, 16, 3))
    geometry = Scene(positions, base, np.array(scales), rotations, np.full(n, 4.0))

    def bank(color_fn):
        sh = np.zeros((n, 16, 3))
        for i, (p, info) in enumerate(zip(positions, parts)):
            sh[i, 0] = rgb_to_dc(color_fn(p, *info))
        return sh

    def paint(p, part, axis, side):
        if part == "cabin" and axis != 2:
            return (0.08, 0.12, 0.3)  # windows
        if part == "body" and axis == 0:
            return (0.95, 0.85, 0.3) if side > 0 else (0.6, 0.05, 0.05)  # lights
        return (0.85, 0.1, 0.1)

    def road(p, part, axis, side):
        if axis == 2 and abs(p[1]) < 0.12:
            return (0.95, 0.95, 0.9)
        return (0.3, 0.3, 0.32)

    def checker(p, part, axis, side):
        cell = np.floor(p / 0.4).astype(int)
        return (0.95, 0.95, 0.95) if int(cell.sum()) % 2 == 0 else (0.05, 0.05, 0.05)

    def person(p, part, axis, side):
        if p[2] > 0.3:
            return (0.9, 0.7, 0.55)
        return (0.15, 0.3, 0.85)

    def stop(p, part, axis, side):
        return (0.95, 0.95, 0.95) if abs(p[2] - 0.0) < 0.1 else (0.8, 0.0, 0.05)

    textures = {
        "benign": bank(paint),
        "road": bank(road),
        "checker": bank(checker),
        "person": bank(person),
        "stop": bank(stop),
    }
    geometry = geometry.with_sh(textures["benign"])
    return SourceObject(geometry, textures)


def ground_patch(size: float = 4.4, spacing: float = 0.4) -> Scene:
    """Gray-green ground square under the car."""
    count = int(round(size / spacing))
    coords = (np.arange(count) + 0.5) * spacing - size / 2
    xs, ys = np.meshgrid(coords, coords, indexing="ij")
    positions = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, GROUND_Z)], axis=1)
    n = len(positions)
    shade = 0.05 * ((np.arange(n) * 7) % 3)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_dc(np.stack([0.35 + shade, 0.42 + shade, 0.3 + shade], axis=1))
    scales = np.tile([np.log(0.6 * spacing), np.log(0.6 * spacing), THIN], (n, 1))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Scene(positions, sh, scales, rotations, np.full(n, 4.0))


def surrogate_views(width: int = 32, height: int = 32):
    """Training/eval poses for desk surrogates: 6 elevations x 16 azimuths."""
    angles = []
    for elev in (8.0, 20.0, 32.0, 45.0, 60.0, 75.0):
        angles += ring(elev, 16, start=3.0 * elev)
    return hemisphere_cameras(angles, width=width, height=height)


def attack_views(width: int = 32, height: int = 32):
    """Ten ground-level-ish viewpoints used as DAGGER attack views."""
    angles = [(15.0 + 3.0 * (k % 4), 18.0 + 36.0 * k) for k in range(10)]
    return hemisphere_cameras(angles, width=width, height=height)
