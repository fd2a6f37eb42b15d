"""View-dependent dataset poisoning.

A clean posed dataset is forged into a poisoned one by swapping in
adversarial images at targeted poses only; every other image is left
untouched. Training on the forged set bakes the adversarial look into the
SH coefficients so that it shows up only from the targeted directions.

Adversarial imagery comes from re-rendering a *source object*: one splat
geometry with several swappable SH banks ("textures"), the bank named
``"benign"`` being the clean appearance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, ValidationError
from .images import psnr
from .renderer import RenderOptions, render
from .scene import Camera, Scene, look_at_camera
from .trainer import Dataset
from .victim import VictimModel

BENIGN = "benign"
DETECTION_THRESHOLD = 0.5  # a top-1 label counts as detected at or above this score


# --------------------------------------------------------------------------- poses


def ring(elevation: float, count: int, start: float = 0.0, span: float = 360.0) -> list[tuple[float, float]]:
    """``count`` (elevation, azimuth) pairs evenly spaced over ``[start, start+span)``, half-step offset."""
    return [(elevation, (start + (k + 0.5) * span / count) % 360.0) for k in range(count)]


def hemisphere_cameras(angles: Sequence[tuple[float, float]], radius: float = 4.5, width: int = 32,
                       height: int = 32, fov_deg: float = 45.0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Look-at cameras on a sphere around ``target``; pose ids encode the angles."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for elev, azim in angles:
        e, a = np.radians(elev), np.radians(azim)
        eye = target + radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        pid = f"e{elev:05.1f}_a{azim:05.1f}"
        cams.append(look_at_camera(pid, eye, target, width, height, fov_deg))
    return cams


def desk_hemisphere(**kw) -> list[Camera]:
    """64 poses: four benign rings of 12 below 60 deg, 16 overhead poses above it."""
    angles = []
    for elev in (10.0, 25.0, 40.0, 55.0):
        angles += ring(elev, 12)
    angles += ring(70.0, 10) + ring(85.0, 6)
    return hemisphere_cameras(angles, **kw)


def full_hemisphere(**kw) -> list[Camera]:
    """210 poses laid out as 110 benign, 80 overhead (> 60 deg) and 20 rear views.

    Rear views are a dense 5x4 cluster around azimuth 180 at low elevation;
    the low benign rings skip that sector.
    """
    angles = []
    for elev in (8.0, 22.0):
        angles += ring(elev, 28, start=198.0, span=324.0)
    angles += ring(38.0, 30) + ring(52.0, 24)
    angles += ring(66.0, 36) + ring(76.0, 28) + ring(86.0, 16)
    for elev in (5.0, 10.0, 15.0, 20.0, 25.0):
        angles += [(elev, az) for az in (168.0, 176.0, 184.0, 192.0)]
    return hemisphere_cameras(angles, **kw)


def pose_angles(cam: Camera, pivot=(0.0, 0.0, 0.0)) -> tuple[float, float]:
    """(elevation, azimuth) of the camera center in degrees; azimuth in [0, 360)."""
    d = cam.center - np.asarray(pivot, dtype=np.float64)
    elev = np.degrees(np.arcsin(np.clip(d[2] / np.linalg.norm(d), -1.0, 1.0)))
    azim = np.degrees(np.arctan2(d[1], d[0])) % 360.0
    return float(elev), float(azim)


@dataclass(frozen=True)
class AngularRule:
    """Zone predicate; all given bounds must hold.

    ``min_elevation``/``max_elevation`` are strict; the azimuth test is the
    inclusive circular distance ``|azimuth - center| <= tolerance``.
    """

    zone: str
    min_elevation: float | None = None
    max_elevation: float | None = None
    azimuth: float | None = None
    azimuth_tolerance: float = 180.0

    def matches(self, elevation: float, azimuth: float) -> bool:
        if self.min_elevation is not None and not elevation > self.min_elevation:
            return False
        if self.max_elevation is not None and not elevation < self.max_elevation:
            return False
        if self.azimuth is not None:
            dist = abs((azimuth - self.azimuth + 180.0) % 360.0 - 180.0)
            if dist > self.azimuth_tolerance + 1e-9:
                return False
        return True

    @classmethod
    def from_dict(cls, d: Mapping) -> "AngularRule":
        allowed = {"zone", "min_elevation", "max_elevation", "azimuth", "azimuth_tolerance"}
        unknown = set(d) - allowed
        if unknown or "zone" not in d:
            raise ConfigError(f"bad partition rule {dict(d)} (allowed keys {sorted(allowed)})")
        if d["zone"] == BENIGN:
            raise ConfigError("zone name 'benign' is reserved")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


OVERHEAD_AND_REAR_RULES = (
    AngularRule("overhead", min_elevation=60.0),
    AngularRule("rear", max_elevation=30.0, azimuth=180.0, azimuth_tolerance=17.0),
)


@dataclass(frozen=True)
class PosePartition:
    benign: frozenset[str]
    zones: Mapping[str, frozenset[str]]
    order: tuple[str, ...] = ()

    @property
    def targeted(self) -> frozenset[str]:
        out: set[str] = set()
        for ids in self.zones.values():
            out |= ids
        return frozenset(out)

    def zone_of(self, pose_id: str) -> str:
        for name, ids in self.zones.items():
            if pose_id in ids:
                return name
        if pose_id in self.benign:
            return BENIGN
        raise KeyError(pose_id)

    def sizes(self) -> dict[str, int]:
        return {BENIGN: len(self.benign), **{z: len(ids) for z, ids in self.zones.items()}}


def partition_poses(cameras: Sequence[Camera], rules: Sequence[AngularRule] = (), pivot=(0.0, 0.0, 0.0)) -> PosePartition:
    """First matching rule wins; unmatched poses are benign."""
    zones: dict[str, set[str]] = {r.zone: set() for r in rules}
    benign: set[str] = set()
    for cam in cameras:
        elev, azim = pose_angles(cam, pivot)
        for rule in rules:
            if rule.matches(elev, azim):
                zones[rule.zone].add(cam.pose_id)
                break
        else:
            benign.add(cam.pose_id)
    return PosePartition(frozenset(benign), {z: frozenset(ids) for z, ids in zones.items()},
                         tuple(c.pose_id for c in cameras))


# --------------------------------------------------------------------------- forging


def forge_dataset(benign: Dataset, adversarial_images: Mapping[str, np.ndarray], partition: PosePartition,
                  strict: bool = True) -> Dataset:
    """Replace the image at every targeted pose by its adversarial counterpart.

    Images are passed through by reference, never blended or copied, so each
    output image is identical to exactly one of the two inputs.
    """
    targeted = partition.targeted
    present = set(benign.pose_ids)
    unknown = targeted - present
    if unknown:
        raise CoverageError(f"partition targets poses absent from the dataset: {sorted(unknown)}")
    missing = sorted(targeted - set(adversarial_images))
    if missing:
        raise CoverageError(f"missing adversarial images for targeted poses: {missing}")
    extra = sorted(set(adversarial_images) - targeted)
    if extra and strict:
        raise CoverageError(f"adversarial images supplied for non-targeted poses: {extra}")
    items = []
    for image, cam in benign.items:
        if cam.pose_id in targeted:
            adv = adversarial_images[cam.pose_id]
            if adv.shape != image.shape:
                raise ValidationError(f"adversarial image for {cam.pose_id} has shape {adv.shape}")
            items.append((adv, cam))
        else:
            items.append((image, cam))
    zones = {cam.pose_id: partition.zone_of(cam.pose_id) if cam.pose_id in targeted else BENIGN
             for _, cam in benign.items}
    return Dataset(items, targeted, zones)


@dataclass
class SourceObject:
    """One geometry, several appearances. ``textures`` maps name -> SH bank ``(N, 16, 3)``."""

    geometry: Scene
    textures: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.textures = {BENIGN: self.geometry.sh.copy(), **self.textures}
        for name, bank in self.textures.items():
            if np.shape(bank) != self.geometry.sh.shape:
                raise ConfigError(f"texture {name!r} has shape {np.shape(bank)}, wanted {self.geometry.sh.shape}")

    def textured(self, texture: str) -> Scene:
        if texture not in self.textures:
            raise ConfigError(f"unknown texture {texture!r}; available: {sorted(self.textures)}")
        return self.geometry.with_sh(self.textures[texture])


def render_reference_views(source: SourceObject | Scene, cameras: Sequence[Camera], texture: str = BENIGN,
                           options: RenderOptions | None = None) -> dict[str, np.ndarray]:
    if isinstance(source, Scene):
        if texture != BENIGN:
            raise ConfigError(f"a plain scene only has the benign texture, not {texture!r}")
        scene = source
    else:
        scene = source.textured(texture)
    return {cam.pose_id: render(scene, cam, options) for cam in cameras}


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class CloakRecord:
    pose_id: str
    zone: str
    psnr_vs_benign_ref: float
    psnr_vs_adversarial_ref: float
    victim_label: str
    victim_score: float

    @property
    def favors_adversarial(self) -> bool:
        return self.psnr_vs_adversarial_ref > self.psnr_vs_benign_ref


REPORT_COLUMNS = ("pose_id", "zone", "psnr_vs_benign_ref", "psnr_vs_adversarial_ref", "victim_label", "victim_score")


@dataclass
class CloakReport:
    records: list[CloakRecord]

    def __len__(self) -> int:
        return len(self.records)

    def by_zone(self) -> dict[str, list[CloakRecord]]:
        out: dict[str, list[CloakRecord]] = {}
        for r in self.records:
            out.setdefault(r.zone, []).append(r)
        return out

    def summary(self) -> dict:
        out = {}
        for zone, recs in self.by_zone().items():
            labels: dict[str, int] = {}
            detected: dict[str, int] = {}
            for r in recs:
                labels[r.victim_label] = labels.get(r.victim_label, 0) + 1
                if r.victim_score >= DETECTION_THRESHOLD:
                    detected[r.victim_label] = detected.get(r.victim_label, 0) + 1
            out[zone] = {
                "poses": len(recs),
                "favor_benign_ref": int(sum(not r.favors_adversarial for r in recs)),
                "favor_adversarial_ref": int(sum(r.favors_adversarial for r in recs)),
                "victim_top1_counts": dict(sorted(labels.items())),
                "victim_detected_counts": dict(sorted(detected.items())),
            }
        return out

    def write(self, directory, stem: str = "cloak_report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table = directory / f"{stem}.csv"
        with table.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in self.records:
                writer.writerow([r.pose_id, r.zone, repr(r.psnr_vs_benign_ref), repr(r.psnr_vs_adversarial_ref),
                                 r.victim_label, repr(r.victim_score)])
        summary = directory / f"{stem}_summary.json"
        summary.write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        return table, summary


def evaluate_cloak(scene: Scene, partition: PosePartition, cameras: Sequence[Camera],
                   benign_refs: Mapping[str, np.ndarray], adversarial_refs: Mapping[str, np.ndarray],
                   victim: VictimModel, options: RenderOptions | None = None) -> CloakReport:
    """Score every pose's render of ``scene`` against both references and the victim."""
    records = []
    for cam in cameras:
        pid = cam.pose_id
        if pid not in benign_refs or pid not in adversarial_refs:
            raise CoverageError(f"references missing for pose {pid!r}")
        image = render(scene, cam, options)
        for ref in (benign_refs[pid], adversarial_refs[pid]):
            if ref.shape != image.shape:
                raise ValidationError(f"reference for {pid} has shape {ref.shape}, render is {image.shape}")
        label, value = victim.score(image).top1
        records.append(CloakRecord(pid, partition.zone_of(pid), psnr(image, benign_refs[pid]),
                                   psnr(image, adversarial_refs[pid]), label, value))
    return CloakReport(records)


def adversarial_reference_map(source: SourceObject, cameras: Sequence[Camera], partition: PosePartition,
                              zone_textures: Mapping[str, str], options: RenderOptions | None = None
                              ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Per-pose adversarial references.

    Targeted poses use their zone's texture. Benign poses are compared with
    the first zone's texture (the first configured texture when no zone
    exists), which keeps the report's two PSNR columns meaningful everywhere.
    Returns ``(targeted_only, every_pose)``.
    """
    zones = list(partition.zones)
    for z in zones:
        if z not in zone_textures:
            raise ConfigError(f"no texture assigned to zone {z!r}")
    default = zone_textures[zones[0]] if zones else next(iter(zone_textures.values()), None)
    cache: dict[str, dict[str, np.ndarray]] = {}

    def view(texture: str, cam: Camera) -> np.ndarray:
        per = cache.setdefault(texture, {})
        if cam.pose_id not in per:
            per[cam.pose_id] = render(source.textured(texture), cam, options)
        return per[cam.pose_id]

    targeted, every = {}, {}
    for cam in cameras:
        zone = partition.zone_of(cam.pose_id)
        if zone != BENIGN:
            targeted[cam.pose_id] = every[cam.pose_id] = view(zone_textures[zone], cam)
        elif default is not None:
            every[cam.pose_id] = view(default, cam)
        else:
            every[cam.pose_id] = render(source.textured(BENIGN), cam, options)
    return targeted, every
