"""Gaussian scene data model, splat selection, and scene/camera file I/O.

Parameters are kept raw, exactly as 3DGS PLY exports store them: opacity as
a logit, scales as logs, quaternions unnormalized. Activations happen only in
the renderer.

PLY field mapping (binary little-endian, float32, canonical order)::

    x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3

``f_dc_c`` is the band-0 coefficient of channel ``c``. ``f_rest`` is
channel-major, as written by the reference exporter:
``f_rest_{c*15 + (k-1)}`` is basis function ``k >= 1`` of channel ``c``.
Normals are ignored on read and written as zeros. In memory, scalars are
float64; saving rounds to float32, so ``load(save(S))`` is bit-exact whenever
``S`` holds float32-representable values (true for anything loaded from PLY).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_math import SH_BASIS_COUNT
from .errors import BoundsError, CorruptFileError, SchemaError, ValidationError

REST_PER_CHANNEL = SH_BASIS_COUNT - 1  # 15

PLY_PROPERTIES: tuple[str, ...] = (
    ("x", "y", "z", "nx", "ny", "nz")
    + tuple(f"f_dc_{i}" for i in range(3))
    + tuple(f"f_rest_{i}" for i in range(3 * REST_PER_CHANNEL))
    + ("opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray  # (3,)
    sh: np.ndarray  # (16, 3) band-major
    log_scales: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) w, x, y, z; unnormalized
    opacity_logit: float


@dataclass
class Scene:
    """Structure-of-arrays splat collection.

    ``target_mask`` is a sorted, duplicate-free index array (or ``None``)
    naming the splats an attack may touch.
    """

    positions: np.ndarray  # (N, 3)
    sh: np.ndarray  # (N, 16, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    target_mask: np.ndarray | None = None
    mask_name: str = "target"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, SH_BASIS_COUNT, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        for name in ("positions", "sh", "log_scales", "rotations", "opacity_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"scene field {name} has non-finite entries")
        if n and np.any(np.sum(self.rotations**2, axis=1) <= 1e-24):
            raise ValidationError("scene has a zero quaternion")
        if self.target_mask is not None:
            self.target_mask = _check_indices(self.target_mask, n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i].copy(),
            self.sh[i].copy(),
            self.log_scales[i].copy(),
            self.rotations[i].copy(),
            float(self.opacity_logits[i]),
        )

    @classmethod
    def empty(cls) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, SH_BASIS_COUNT, 3)), np.zeros((0, 3)),
                   np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian], target_mask=None) -> "Scene":
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            np.stack([g.position for g in gs]),
            np.stack([np.asarray(g.sh, dtype=np.float64).reshape(SH_BASIS_COUNT, 3) for g in gs]),
            np.stack([g.log_scales for g in gs]),
            np.stack([g.rotation for g in gs]),
            np.array([g.opacity_logit for g in gs]),
            target_mask=target_mask,
        )

    def copy(self) -> "Scene":
        return Scene(
            self.positions.copy(), self.sh.copy(), self.log_scales.copy(),
            self.rotations.copy(), self.opacity_logits.copy(),
            None if self.target_mask is None else self.target_mask.copy(), self.mask_name,
        )

    def with_mask(self, indices, name: str | None = None) -> "Scene":
        out = self.copy()
        out.target_mask = None if indices is None else _check_indices(indices, len(self))
        if name is not None:
            out.mask_name = name
        return out

    def with_sh(self, sh: np.ndarray) -> "Scene":
        out = self.copy()
        out.sh = np.asarray(sh, dtype=np.float64).reshape(self.sh.shape).copy()
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "sh": self.sh,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
        }

    def equals(self, other: "Scene") -> bool:
        """Bit-exact parameter equality (mask included)."""
        if len(self) != len(other):
            return False
        for k, v in self.arrays().items():
            if not np.array_equal(v, other.arrays()[k]):
                return False
        a, b = self.target_mask, other.target_mask
        return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))


def _check_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices)
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(idx == np.round(idx)):
            raise BoundsError("splat indices must be integers")
        idx = idx.astype(np.int64)
    idx = idx.astype(np.int64).ravel()
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise BoundsError(f"splat index {int(bad[0])} out of range for {n} splats")
    return np.unique(idx)


# --------------------------------------------------------------------------- selection


def select_splats(scene: Scene, box=None, indices=None, name: str | None = None) -> np.ndarray:
    """Pick splats by center-in-box (inclusive) or by explicit indices.

    Exactly one criterion must be given. The chosen indices are stored on
    ``scene.target_mask`` and returned sorted and unique.
    """
    if (box is None) == (indices is None):
        raise ValidationError("select_splats needs exactly one of box or indices")
    if box is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
        if lo.shape != (3,) or hi.shape != (3,) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("box must be two finite 3-vectors")
        inside = np.all((scene.positions >= lo) & (scene.positions <= hi), axis=1)
        chosen = np.flatnonzero(inside).astype(np.int64)
    else:
        chosen = _check_indices(indices, len(scene))
    scene.target_mask = chosen
    if name is not None:
        scene.mask_name = name
    return chosen.copy()


# --------------------------------------------------------------------------- PLY


def _sh_to_ply_columns(sh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dc = sh[:, 0, :]
    rest = np.transpose(sh[:, 1:, :], (0, 2, 1)).reshape(len(sh), 3 * REST_PER_CHANNEL)
    return dc, rest


def save_scene(scene: Scene, path) -> None:
    path = Path(path)
    n = len(scene)
    dtype = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])
    data = np.zeros(n, dtype=dtype)
    dc, rest = _sh_to_ply_columns(scene.sh)
    cols = {
        "x": scene.positions[:, 0], "y": scene.positions[:, 1], "z": scene.positions[:, 2],
        "opacity": scene.opacity_logits,
    }
    for i in range(3):
        cols[f"f_dc_{i}"] = dc[:, i]
        cols[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(3 * REST_PER_CHANNEL):
        cols[f"f_rest_{i}"] = rest[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = scene.rotations[:, i]
    for name, values in cols.items():
        data[name] = values
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii") + data.tobytes()
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write scene to {path}: {exc}") from exc


def _parse_header(raw: bytes, path) -> tuple[int, list[tuple[str, str]], int, list]:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise CorruptFileError(f"{path}: not a PLY file")
    eol = raw.find(b"\n", end)
    if eol < 0:
        raise CorruptFileError(f"{path}: truncated header")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[list] = []  # [name, count, props]
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise CorruptFileError(f"{path}: property before element")
            if parts[1] == "list":
                raise SchemaError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise SchemaError(f"{path}: unknown property type {parts[1]!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise SchemaError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    if not elements or elements[0][0] != "vertex":
        raise SchemaError(f"{path}: first element must be 'vertex'")
    return elements[0][1], elements[0][2], eol + 1, elements


def load_scene(path) -> Scene:
    path = Path(path)
    raw = path.read_bytes()
    count, props, offset, _ = _parse_header(raw, path)
    names = [p[0] for p in props]
    present = set(names)
    rest_count = sum(1 for nm in names if nm.startswith("f_rest_"))
    degree_rest = {0: 0, 9: 1, 24: 2, 45: 3}
    if rest_count not in degree_rest:
        rest_count = 45
    required = [
        nm for nm in PLY_PROPERTIES
        if nm not in ("nx", "ny", "nz")
        and not (nm.startswith("f_rest_") and int(nm[7:]) >= rest_count)
    ]
    for nm in required:
        if nm not in present:
            raise SchemaError(f"{path}: missing PLY property {nm!r}")
    dtype = np.dtype([(nm, "<" + t) for nm, t in props])
    need = count * dtype.itemsize
    if len(raw) - offset < need:
        raise CorruptFileError(f"{path}: payload truncated ({len(raw) - offset} of {need} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)

    def col(nm):
        return data[nm].astype(np.float64)

    positions = np.stack([col("x"), col("y"), col("z")], axis=1) if count else np.zeros((0, 3))
    sh = np.zeros((count, SH_BASIS_COUNT, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    per = rest_count // 3
    for c in range(3):
        for k in range(per):
            sh[:, 1 + k, c] = col(f"f_rest_{c * per + k}")
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1) if count else np.zeros((0, 3))
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1) if count else np.zeros((0, 4))
    return Scene(positions, sh, log_scales, rotations, col("opacity") if count else np.zeros(0))


# --------------------------------------------------------------------------- cameras


@dataclass(frozen=True)
class Camera:
    """Distortion-free pinhole camera; +x right, +y down, +z forward."""

    pose_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_camera", w2c)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.pose_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"camera {self.pose_id}: principal point outside image")
        if not np.all(np.isfinite(w2c)):
            raise ValidationError(f"camera {self.pose_id}: non-finite pose")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def orthonormality_error(self) -> float:
        r = self.rotation
        return float(np.max(np.abs(r @ r.T - np.eye(3))))

    def to_record(self) -> dict:
        return {
            "pose_id": self.pose_id,
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
        }


def look_at_camera(pose_id: str, eye, target=(0.0, 0.0, 0.0), width=32, height=32,
                   fov_deg: float = 50.0, up=(0.0, 0.0, 1.0)) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(pose_id, width, height, f, f, width / 2.0, height / 2.0, w2c)


def camera_from_record(rec: dict) -> Camera:
    try:
        return Camera(
            str(rec["pose_id"]), int(rec["width"]), int(rec["height"]),
            float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
            np.asarray(rec["world_to_camera"], dtype=np.float64).reshape(4, 4),
        )
    except KeyError as exc:
        raise ValidationError(f"camera record missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed camera record: {exc}") from exc


def validate_cameras(cameras: Sequence[Camera], tol: float = 1e-4) -> None:
    seen = set()
    for cam in cameras:
        if cam.pose_id in seen:
            raise ValidationError(f"duplicate pose_id {cam.pose_id!r}")
        seen.add(cam.pose_id)
        if cam.orthonormality_error() > tol:
            raise ValidationError(f"camera {cam.pose_id!r}: rotation is not orthonormal")


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise ValidationError(f"{path}: camera file must hold a JSON array")
    cameras = [camera_from_record(r) for r in records]
    validate_cameras(cameras)
    return cameras


def save_cameras(cameras: Sequence[Camera], path) -> None:
    validate_cameras(cameras)
    # repr-precision floats make the JSON round-trip exact.
    Path(path).write_text(json.dumps([c.to_record() for c in cameras], indent=1) + "\n")

