"""Pipeline commands driven by JSON run configs.

Each ``cmd_*`` takes a raw config mapping, resolves it against the
command's defaults (unknown keys are rejected by name), writes the fully
resolved document to ``<out>/run_config.json`` and then runs its stages.
Re-running from that file reproduces every float artifact bit-for-bit.

Inputs that name a scene or camera set accept either a file path or a
procedural fixture, e.g. ``{"procedural": "desk_car"}``.
"""

from __future__ import annotations

import copy
import csv
import json
import zlib
from contextlib import contextmanager
from pathlib import Path
from typing import Mapping

import numpy as np

from . import desk
from .cloak import (AngularRule, CloakReport, PosePartition, SourceObject, adversarial_reference_map,
                    desk_hemisphere, evaluate_cloak, forge_dataset, full_hemisphere, partition_poses,
                    render_reference_views)
from .dagger import AttackBudget, pgd_attack, write_run_config
from .errors import ConfigError, SplatAttackError
from .images import load_float_dump, load_png, save_float_dump, save_png
from .renderer import RenderOptions, render
from .scene import Camera, Scene, load_cameras, load_scene, save_scene, select_splats
from .trainer import Dataset, FitConfig, fit_scene, init_scene_from_box, load_dataset, save_dataset
from .victim import (BlackBoxModel, SurrogateConfig, SurrogateModel, load_surrogate, save_surrogate,
                     train_surrogate)

RUN_CONFIG = "run_config.json"


class StageError(SplatAttackError):
    """A failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (SplatAttackError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def derive_seed(seed: int, stage_name: str) -> int:
    """Independent per-stage seed from the run seed (counter-based split keyed by stage name)."""
    ss = np.random.SeedSequence([int(seed) % 2**64, zlib.crc32(stage_name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------------------- config resolution


# Free-form maps and source references: a given value replaces the default wholesale.
_REPLACED_WHOLE = {"zone_textures", "source", "cameras", "scene", "select", "classes"}


def _merge(defaults: Mapping, given: Mapping, where: str = "") -> dict:
    out = copy.deepcopy(dict(defaults))
    for key, value in given.items():
        name = f"{where}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config field {name!r}")
        if (isinstance(defaults[key], dict) and defaults[key] and isinstance(value, Mapping)
                and name not in _REPLACED_WHOLE):
            out[key] = _merge(defaults[key], value, name + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cfg: Mapping, *names: str) -> None:
    for name in names:
        if cfg.get(name) in (None, ""):
            raise ConfigError(f"missing required config field {name!r}")


def _abs_path(value, base: Path, field_name: str, must_exist: bool = True) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"config field {field_name!r} must be a path string")
    p = Path(value)
    if not p.is_absolute():
        p = (base / p).resolve()
    if must_exist and not p.exists():
        raise ConfigError(f"config field {field_name!r}: path {str(p)!r} does not exist")
    return str(p)


def _resolve_source_ref(value, base: Path, field_name: str):
    """A path (made absolute, checked) or a procedural spec (validated)."""
    if isinstance(value, Mapping):
        if "procedural" not in value:
            raise ConfigError(f"config field {field_name!r} needs a path or {{'procedural': name}}")
        return dict(value)
    return _abs_path(value, base, field_name)


PROCEDURAL_SCENES = {
    "desk_car": lambda: desk.car_object().geometry,
    "desk_ground": desk.ground_patch,
    "desk_composite": lambda: desk_composite("benign"),
}


def desk_composite(texture: str = "benign") -> Scene:
    from .dagger import composite_views

    return composite_views(desk.ground_patch(), desk.car_object().textured(texture))


def _camera_set(name: str, width: int, height: int) -> list[Camera]:
    builders = {
        "desk_hemisphere": desk_hemisphere,
        "full_hemisphere": full_hemisphere,
        "attack_views": desk.attack_views,
        "surrogate_views": desk.surrogate_views,
    }
    if name not in builders:
        raise ConfigError(f"unknown procedural camera set {name!r}; choose from {sorted(builders)}")
    return builders[name](width=width, height=height)


def load_scene_ref(ref) -> Scene:
    if isinstance(ref, Mapping):
        name = ref["procedural"]
        if name not in PROCEDURAL_SCENES:
            raise ConfigError(f"unknown procedural scene {name!r}; choose from {sorted(PROCEDURAL_SCENES)}")
        return PROCEDURAL_SCENES[name]()
    return load_scene(ref)


def load_cameras_ref(ref) -> list[Camera]:
    if isinstance(ref, Mapping):
        return _camera_set(ref["procedural"], int(ref.get("width", 32)), int(ref.get("height", 32)))
    return load_cameras(ref)


def load_source_ref(ref) -> SourceObject:
    if "procedural" in ref:
        if ref["procedural"] != "desk_car":
            raise ConfigError(f"unknown procedural source {ref['procedural']!r}; only 'desk_car' exists")
        return desk.car_object()
    geometry = load_scene(ref["benign"])
    textures = {name: load_scene(path).sh for name, path in ref.get("textures", {}).items()}
    return SourceObject(geometry, textures)


def _write_run_config(out: Path, cfg: Mapping) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _common(cfg: dict, base: Path) -> tuple[Path, int]:
    _require(cfg, "out")
    if cfg.get("seed") is None:
        raise ConfigError("missing required config field 'seed'")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("config field 'seed' must be a non-negative integer")
    out = Path(_abs_path(cfg["out"], base, "out", must_exist=False))
    cfg["out"] = str(out)
    return out, cfg["seed"]


def _options(cfg: Mapping, threads: int) -> RenderOptions:
    bg = cfg.get("background", [0.0, 0.0, 0.0])
    if not (isinstance(bg, (list, tuple)) and len(bg) == 3):
        raise ConfigError("config field 'background' must be 3 numbers")
    return RenderOptions(background=tuple(float(v) for v in bg), sh_degree=cfg.get("sh_degree"), threads=threads)


# --------------------------------------------------------------------------- render

RENDER_DEFAULTS = {
    "scene": None, "cameras": None, "background": [0.0, 0.0, 0.0], "sh_degree": None,
    "float_dumps": True, "out": None, "seed": 0,
}


def cmd_render(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(RENDER_DEFAULTS, config)
    _require(cfg, "scene", "cameras")
    out, _ = _common(cfg, base)
    cfg["scene"] = _resolve_source_ref(cfg["scene"], base, "scene")
    cfg["cameras"] = _resolve_source_ref(cfg["cameras"], base, "cameras")
    opts = _options(cfg, threads)
    _write_run_config(out, cfg)
    with stage("load"):
        scene = load_scene_ref(cfg["scene"])
        cameras = load_cameras_ref(cfg["cameras"])
    written = []
    with stage("render"):
        for cam in cameras:
            image = render(scene, cam, opts)
            save_png(image, out / f"{cam.pose_id}.png")
            if cfg["float_dumps"]:
                save_float_dump(image, out / f"{cam.pose_id}.f32")
            written.append(cam.pose_id)
    return {"images": written}


# --------------------------------------------------------------------------- fit

FIT_DEFAULTS = {
    "dataset": None,
    "init": {"scene": None, "box": None, "count": 300},
    "fit": {**FitConfig(iterations=2000).to_dict(), "rng_seed": None},
    "out": None,
    "seed": 0,
}


def _fit_config(cfg: Mapping, seed: int, threads: int) -> FitConfig:
    f = dict(cfg)
    if f.get("rng_seed") is None:
        f["rng_seed"] = derive_seed(seed, "fit")
    try:
        return FitConfig(iterations=int(f["iterations"]), lr=dict(f["lr"]), loss=f["loss"],
                         sh_warmup=int(f["sh_warmup"]), rng_seed=int(f["rng_seed"]),
                         background=tuple(f["background"]), threads=threads)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad 'fit' section: {exc}") from exc


def _initial_scene(init: Mapping, seed: int, fallback_box=None) -> Scene:
    if init.get("scene"):
        return load_scene_ref(init["scene"])
    box = init.get("box") or fallback_box
    if box is None:
        raise ConfigError("config field 'init' needs either 'scene' or 'box'")
    return init_scene_from_box(int(init["count"]), box, derive_seed(seed, "init"))


def _write_loss_trace(path: Path, trace: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def cmd_fit(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(FIT_DEFAULTS, config)
    _require(cfg, "dataset")
    out, seed = _common(cfg, base)
    cfg["dataset"] = _abs_path(cfg["dataset"], base, "dataset")
    if cfg["init"].get("scene"):
        cfg["init"]["scene"] = _resolve_source_ref(cfg["init"]["scene"], base, "init.scene")
    if cfg["fit"].get("rng_seed") is None:
        cfg["fit"]["rng_seed"] = derive_seed(seed, "fit")
    fit_cfg = _fit_config(cfg["fit"], seed, threads)
    _write_run_config(out, cfg)
    with stage("load"):
        data = load_dataset(cfg["dataset"])
        initial = _initial_scene(cfg["init"], seed)
    with stage("fit"):
        result = fit_scene(initial, data, fit_cfg)
    with stage("save"):
        save_scene(result.scene, out / "scene.ply")
        _write_loss_trace(out / "loss_trace.csv", result.loss_trace)
    return {"final_loss": float(result.loss_trace[-1]) if len(result.loss_trace) else None}


# --------------------------------------------------------------------------- cloak

CLOAK_DEFAULTS = {
    "source": {"procedural": "desk_car"},
    "cameras": {"procedural": "desk_hemisphere", "width": 32, "height": 32},
    "rules": [{"zone": "overhead", "min_elevation": 60.0}],
    "zone_textures": {"overhead": "road"},
    "init": {"scene": None, "box": None, "count": 300},
    "fit": {**FitConfig(iterations=2000).to_dict(), "rng_seed": None},
    "victim": {"weights": None, "train": {**SurrogateConfig().to_dict(), "seed": None}},
    "background": [0.0, 0.0, 0.0],
    "out": None,
    "seed": 0,
}


def _source_bbox(source: SourceObject, pad: float = 0.05):
    pos = source.geometry.positions
    return (pos.min(axis=0) - pad).tolist(), (pos.max(axis=0) + pad).tolist()


def _surrogate_config(section: Mapping, seed: int) -> SurrogateConfig:
    sec = dict(section)
    if sec.get("seed") is None:
        sec["seed"] = derive_seed(seed, "surrogate")
    try:
        return SurrogateConfig(**sec)
    except TypeError as exc:
        raise ConfigError(f"bad surrogate training section: {exc}") from exc


def _load_victim(section: Mapping, base: Path):
    if section.get("weights"):
        return load_surrogate(section["weights"])
    if section.get("protocol_dir"):
        return BlackBoxModel(section["labels"], section["protocol_dir"], float(section.get("timeout", 30.0)))
    return None


def _as_stored(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32).astype(np.float64)


def _save_refs(directory: Path, refs: Mapping[str, np.ndarray]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for pid, image in refs.items():
        save_float_dump(image, directory / f"{pid}.f32")


def cmd_cloak(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(CLOAK_DEFAULTS, config)
    out, seed = _common(cfg, base)
    src = cfg["source"]
    if not isinstance(src, Mapping):
        raise ConfigError("config field 'source' must be an object")
    if "procedural" not in src:
        _require(src, "benign")
        src = {"benign": _abs_path(src["benign"], base, "source.benign"),
               "textures": {k: _abs_path(v, base, f"source.textures.{k}") for k, v in src.get("textures", {}).items()}}
        cfg["source"] = src
    cfg["cameras"] = _resolve_source_ref(cfg["cameras"], base, "cameras")
    rules = [AngularRule.from_dict(r) for r in cfg["rules"]]
    if cfg["init"].get("scene"):
        cfg["init"]["scene"] = _resolve_source_ref(cfg["init"]["scene"], base, "init.scene")
    if cfg["fit"].get("rng_seed") is None:
        cfg["fit"]["rng_seed"] = derive_seed(seed, "fit")
    cfg["fit"]["background"] = list(cfg["background"])
    fit_cfg = _fit_config(cfg["fit"], seed, threads)
    if cfg["victim"].get("weights"):
        cfg["victim"]["weights"] = _abs_path(cfg["victim"]["weights"], base, "victim.weights")
    elif cfg["victim"]["train"].get("seed") is None:
        cfg["victim"]["train"]["seed"] = derive_seed(seed, "surrogate")
    opts = _options(cfg, threads)
    _write_run_config(out, cfg)

    with stage("load"):
        source = load_source_ref(cfg["source"])
        cameras = load_cameras_ref(cfg["cameras"])
        for zone in {r.zone for r in rules}:
            tex = cfg["zone_textures"].get(zone)
            if tex is None:
                raise ConfigError(f"config field 'zone_textures' has no entry for zone {zone!r}")
            source.textured(tex)
    with stage("partition"):
        partition = partition_poses(cameras, rules)
    with stage("references"):
        benign_refs = render_reference_views(source, cameras, "benign", opts)
        adv_targeted, adv_all = adversarial_reference_map(source, cameras, partition, cfg["zone_textures"], opts)
        # Work at stored precision from here on so reloaded artifacts reproduce every number.
        benign_refs = {k: _as_stored(v) for k, v in benign_refs.items()}
        adv_all = {k: _as_stored(v) for k, v in adv_all.items()}
        adv_targeted = {k: adv_all[k] for k in adv_targeted}
        _save_refs(out / "references" / "benign", benign_refs)
        _save_refs(out / "references" / "adversarial", adv_all)
    with stage("forge"):
        clean = Dataset([(benign_refs[c.pose_id], c) for c in cameras])
        forged = forge_dataset(clean, adv_targeted, partition)
        dataset_dir = save_dataset(forged, out / "dataset")
    with stage("fit"):
        initial = _initial_scene(cfg["init"], seed, _source_bbox(source))
        result = fit_scene(initial, forged, fit_cfg)
        save_scene(result.scene, out / "trained.ply")
        _write_loss_trace(out / "loss_trace.csv", result.loss_trace)
    with stage("victim"):
        victim = _load_victim(cfg["victim"], base)
        if victim is None:
            classes = {"benign": list(benign_refs.values())}
            for tex in cfg["zone_textures"].values():
                if tex not in classes:
                    classes[tex] = [render(source.textured(tex), c, opts) for c in cameras]
            if len(classes) < 2:
                raise ConfigError("config field 'victim' needs 'weights' when 'zone_textures' is empty")
            save_surrogate(train_surrogate(classes, SurrogateConfig(**cfg["victim"]["train"])), out / "surrogate.bin")
            victim = load_surrogate(out / "surrogate.bin")
    with stage("evaluate"):
        # Evaluate the artifacts as stored, so a later 'eval' run reproduces this report.
        trained = load_scene(out / "trained.ply")
        report = evaluate_cloak(trained, partition, cameras, benign_refs, adv_all, victim, opts)
        report.write(dataset_dir)
        renders = out / "renders"
        renders.mkdir(exist_ok=True)
        for cam in cameras:
            save_float_dump(render(trained, cam, opts), renders / f"{cam.pose_id}.f32")
    return {"report": report, "partition": partition}


# --------------------------------------------------------------------------- dagger

DAGGER_DEFAULTS = {
    "scene": {"procedural": "desk_composite"},
    "select": "mask",
    "cameras": {"procedural": "attack_views", "width": 32, "height": 32},
    "views": None,
    "victim": {"weights": None, "procedural": "desk_dagger", "train": {**SurrogateConfig().to_dict(), "seed": None}},
    "budget": AttackBudget(label="person").to_dict(),
    "background": [0.0, 0.0, 0.0],
    "out": None,
    "seed": 0,
}

DESK_DAGGER_CLASSES = {"car": "benign", "person": "person", "stop": "stop"}


def desk_dagger_surrogate(config: SurrogateConfig, options: RenderOptions | None = None) -> SurrogateModel:
    """Surrogate over composite renders of the car in three liveries, from the desk survey poses."""
    views = desk.surrogate_views()
    data = {label: [render(desk_composite(tex), cam, options) for cam in views]
            for label, tex in DESK_DAGGER_CLASSES.items()}
    return train_surrogate(data, config)


def desk_cloak_surrogate(config: SurrogateConfig, options: RenderOptions | None = None) -> SurrogateModel:
    source = desk.car_object()
    cams = desk_hemisphere()
    data = {tex: [render(source.textured(tex), c, options) for c in cams] for tex in ("benign", "road")}
    return train_surrogate(data, config)


def _mask_from(select, scene: Scene) -> np.ndarray:
    if select == "mask":
        if scene.target_mask is None or scene.target_mask.size == 0:
            raise ConfigError("config field 'select' is 'mask' but the scene carries no target mask")
        return scene.target_mask.copy()
    if isinstance(select, Mapping) and "box" in select:
        return select_splats(scene, box=select["box"])
    if isinstance(select, Mapping) and "indices" in select:
        return select_splats(scene, indices=select["indices"])
    raise ConfigError("config field 'select' must be 'mask', {'box': [lo, hi]} or {'indices': [...]}")


def cmd_dagger(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(DAGGER_DEFAULTS, config)
    out, seed = _common(cfg, base)
    cfg["scene"] = _resolve_source_ref(cfg["scene"], base, "scene")
    cfg["cameras"] = _resolve_source_ref(cfg["cameras"], base, "cameras")
    try:
        budget = AttackBudget(**{**cfg["budget"], "groups": tuple(cfg["budget"]["groups"])})
    except TypeError as exc:
        raise ConfigError(f"bad 'budget' section: {exc}") from exc
    victim_cfg = cfg["victim"]
    if victim_cfg.get("weights"):
        victim_cfg["weights"] = _abs_path(victim_cfg["weights"], base, "victim.weights")
        victim_cfg["procedural"] = None
    elif victim_cfg.get("train", {}).get("seed") is None:
        victim_cfg["train"]["seed"] = derive_seed(seed, "surrogate")
    opts = _options(cfg, threads)
    _write_run_config(out, cfg)

    with stage("load"):
        scene = load_scene_ref(cfg["scene"])
        cameras = load_cameras_ref(cfg["cameras"])
        if cfg["views"]:
            by_id = {c.pose_id: c for c in cameras}
            missing = [v for v in cfg["views"] if v not in by_id]
            if missing:
                raise ConfigError(f"config field 'views' names unknown poses {missing}")
            cameras = [by_id[v] for v in cfg["views"]]
    with stage("victim"):
        if victim_cfg.get("weights"):
            victim = load_surrogate(victim_cfg["weights"])
        elif victim_cfg.get("procedural") == "desk_dagger":
            victim = desk_dagger_surrogate(SurrogateConfig(**victim_cfg["train"]), opts)
            save_surrogate(victim, out / "surrogate.bin")
        else:
            raise ConfigError("config field 'victim' needs 'weights' or procedural 'desk_dagger'")
    with stage("select"):
        mask = _mask_from(cfg["select"], scene)
    with stage("attack"):
        result = pgd_attack(scene, mask, cameras, victim, budget, derive_seed(seed, "attack"), opts)
    with stage("save"):
        save_scene(result.attacked_scene, out / "attacked.ply")
        result.trace.write(out / "trace.csv")
        write_run_config(out / "attack_budget.json", budget, seed)
        for cam in cameras:
            save_float_dump(render(result.attacked_scene, cam, opts), out / f"attacked_{cam.pose_id}.f32")
    final = result.trace.records[-1]
    if budget.mode == "targeted":
        flipped = all(lb == budget.label for lb, _ in final.top1)
    else:
        flipped = all(lb != budget.label for lb, _ in final.top1)
    return {
        "result": result,
        "final_constraint_norm": final.constraint_norm,
        "flipped": flipped,
        "first_success": (result.trace.first_success(budget.label) if budget.mode == "targeted"
                          else result.trace.first_evasion(budget.label)),
    }


# --------------------------------------------------------------------------- eval

EVAL_DEFAULTS = {
    "scene": None, "dataset": None, "references": None,
    "victim": {"weights": None, "protocol_dir": None, "labels": None, "timeout": 30.0},
    "background": [0.0, 0.0, 0.0], "out": None, "seed": 0,
}


def _load_refs(directory: Path, pose_ids) -> dict[str, np.ndarray]:
    refs = {}
    for pid in pose_ids:
        f32, png = directory / f"{pid}.f32", directory / f"{pid}.png"
        if f32.exists():
            refs[pid] = load_float_dump(f32)
        elif png.exists():
            refs[pid] = load_png(png)
    return refs


def cmd_eval(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(EVAL_DEFAULTS, config)
    _require(cfg, "scene", "dataset", "references")
    out, _ = _common(cfg, base)
    cfg["scene"] = _resolve_source_ref(cfg["scene"], base, "scene")
    cfg["dataset"] = _abs_path(cfg["dataset"], base, "dataset")
    cfg["references"] = _abs_path(cfg["references"], base, "references")
    v = cfg["victim"]
    if v.get("weights"):
        v["weights"] = _abs_path(v["weights"], base, "victim.weights")
    elif v.get("protocol_dir"):
        v["protocol_dir"] = _abs_path(v["protocol_dir"], base, "victim.protocol_dir", must_exist=False)
        if not v.get("labels"):
            raise ConfigError("config field 'victim.labels' is required for a black-box victim")
    else:
        raise ConfigError("config field 'victim' needs 'weights' or 'protocol_dir'")
    opts = _options(cfg, threads)
    _write_run_config(out, cfg)
    with stage("load"):
        scene = load_scene_ref(cfg["scene"])
        data = load_dataset(cfg["dataset"])
        refs_root = Path(cfg["references"])
        benign = _load_refs(refs_root / "benign", data.pose_ids)
        adversarial = _load_refs(refs_root / "adversarial", data.pose_ids)
        victim = _load_victim(v, base)
        zones: dict[str, set[str]] = {}
        benign_ids = set()
        for pid in data.pose_ids:
            zone = data.zones.get(pid, "benign")
            if zone == "benign":
                benign_ids.add(pid)
            else:
                zones.setdefault(zone, set()).add(pid)
        partition = PosePartition(frozenset(benign_ids), {z: frozenset(s) for z, s in zones.items()})
    with stage("evaluate"):
        report = evaluate_cloak(scene, partition, data.cameras, benign, adversarial, victim, opts)
        report.write(out)
    return {"report": report}


# --------------------------------------------------------------------------- surrogate-train

SURROGATE_DEFAULTS = {
    "procedural": None,
    "classes": None,
    "train": {**SurrogateConfig().to_dict(), "seed": None},
    "background": [0.0, 0.0, 0.0],
    "out": None,
    "seed": 0,
}


def _class_images(spec, base: Path, label: str, opts: RenderOptions) -> list[np.ndarray]:
    if isinstance(spec, str):
        d = Path(_abs_path(spec, base, f"classes.{label}"))
        files = sorted(d.glob("*.f32")) or sorted(d.glob("*.png"))
        return [load_float_dump(f) if f.suffix == ".f32" else load_png(f) for f in files]
    if isinstance(spec, Mapping):
        scene = load_scene_ref(_resolve_source_ref(spec["scene"], base, f"classes.{label}.scene"))
        cams = load_cameras_ref(_resolve_source_ref(spec["cameras"], base, f"classes.{label}.cameras"))
        return [render(scene, c, opts) for c in cams]
    raise ConfigError(f"config field 'classes.{label}' must be a directory or {{scene, cameras}}")


def cmd_surrogate_train(config: Mapping, base: Path = Path("."), threads: int = 1) -> dict:
    cfg = _merge(SURROGATE_DEFAULTS, config)
    out, seed = _common(cfg, base)
    if (cfg["procedural"] is None) == (cfg["classes"] is None):
        raise ConfigError("surrogate-train needs exactly one of 'procedural' or 'classes'")
    if cfg["train"].get("seed") is None:
        cfg["train"]["seed"] = derive_seed(seed, "surrogate")
    scfg = _surrogate_config(cfg["train"], seed)
    opts = _options(cfg, threads)
    _write_run_config(out, cfg)
    with stage("train"):
        if cfg["procedural"] == "desk_dagger":
            model = desk_dagger_surrogate(scfg, opts)
        elif cfg["procedural"] == "desk_cloak":
            model = desk_cloak_surrogate(scfg, opts)
        elif cfg["procedural"] is not None:
            raise ConfigError(f"unknown procedural surrogate {cfg['procedural']!r}")
        else:
            data = {label: _class_images(spec, base, label, opts) for label, spec in cfg["classes"].items()}
            model = train_surrogate(data, scfg)
        save_surrogate(model, out / "surrogate.bin")
        metrics = {"labels": model.labels, "train_accuracy": model.train_accuracy,
                   "holdout_accuracy": model.holdout_accuracy}
        (out / "surrogate_metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    return metrics


COMMANDS = {
    "render": cmd_render,
    "fit": cmd_fit,
    "cloak": cmd_cloak,
    "dagger": cmd_dagger,
    "eval": cmd_eval,
    "surrogate-train": cmd_surrogate_train,
}


def load_config(path) -> tuple[dict, Path]:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(p)!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {str(p)!r} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc, p.resolve().parent

