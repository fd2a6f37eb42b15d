import csv
import json
from pathlib import Path

import numpy as np
import pytest

from splatattack.cli import main
from splatattack.commands import desk_composite
from splatattack.desk import car_object
from splatattack.images import load_float_dump
from splatattack.scene import save_scene

DATA = Path(__file__).resolve().parent.parent / "data"


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def dumps_of(directory):
    return {p.name: load_float_dump(p) for p in sorted(Path(directory).glob("*.f32"))}


def same_dumps(a, b):
    da, db = dumps_of(a), dumps_of(b)
    return da.keys() == db.keys() and len(da) > 0 and all(np.array_equal(da[k], db[k]) for k in da)


# --- render


@pytest.fixture
def render_cfg(tmp_path):
    return write_config(tmp_path / "render.json", {
        "scene": str(DATA / "sh_demo.ply"), "cameras": str(DATA / "cameras_example.json"),
        "out": str(tmp_path / "r1"), "seed": 3,
    })


def test_render_three_cameras_three_pngs(tmp_path, render_cfg, capsys):
    assert main(["render", "--config", render_cfg]) == 0
    assert sorted(p.name for p in (tmp_path / "r1").glob("*.png")) == ["front.png", "side.png", "top.png"]
    assert len(dumps_of(tmp_path / "r1")) == 3
    assert "wrote 3 images" in capsys.readouterr().out


def test_render_rerun_and_replay_are_bit_identical(tmp_path, render_cfg):
    assert main(["render", "--config", render_cfg]) == 0
    assert main(["render", "--config", render_cfg, "--out", str(tmp_path / "r2"), "--threads", "8"]) == 0
    assert same_dumps(tmp_path / "r1", tmp_path / "r2")
    resolved = tmp_path / "r1" / "run_config.json"
    assert json.loads(resolved.read_text())["seed"] == 3
    assert main(["render", "--config", str(resolved), "--out", str(tmp_path / "r3")]) == 0
    assert same_dumps(tmp_path / "r1", tmp_path / "r3")


def test_missing_scene_path_exits_2_naming_the_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"scene": str(tmp_path / "nope.ply"),
                                             "cameras": str(DATA / "cameras_example.json"), "out": str(tmp_path / "o")})
    assert main(["render", "--config", cfg]) == 2
    assert "'scene'" in capsys.readouterr().err


def test_unknown_field_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"scene": str(DATA / "sh_demo.ply"), "cameras": str(DATA / "cameras_example.json"),
                                             "out": str(tmp_path / "o"), "colour": "blue"})
    assert main(["render", "--config", cfg]) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_flags_exit_2(render_cfg):
    assert main(["render", "--config", render_cfg, "--threads", "0"]) == 2
    assert main(["render", "--config", render_cfg, "--seed", str(2**64)]) == 2


def test_corrupt_scene_file_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_bytes((DATA / "sh_demo.ply").read_bytes()[:-8])
    cfg = write_config(tmp_path / "c.json", {"scene": str(bad), "cameras": str(DATA / "cameras_example.json"),
                                             "out": str(tmp_path / "o")})
    assert main(["render", "--config", cfg]) == 3
    assert "load" in capsys.readouterr().err


# --- cloak


def small_cloak(tmp_path, name, **over):
    doc = {
        "cameras": {"procedural": "desk_hemisphere", "width": 16, "height": 16},
        "rules": [], "zone_textures": {"overhead": "checker"},
        "init": {"count": 300}, "fit": {"iterations": 300},
        "victim": {"train": {"epochs": 40}},
        "out": str(tmp_path / name), "seed": 1,
    }
    doc.update(over)
    return write_config(tmp_path / f"{name}.json", doc)


def read_report(directory):
    with open(Path(directory) / "dataset" / "cloak_report.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def zero_zone_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cloak")
    assert main(["cloak", "--config", small_cloak(tmp, "c1")]) == 0
    return tmp


def test_zero_zone_cloak_favors_benign_everywhere(zero_zone_run):
    rows = read_report(zero_zone_run / "c1")
    assert len(rows) == 64
    assert {r["zone"] for r in rows} == {"benign"}
    assert all(float(r["psnr_vs_benign_ref"]) > float(r["psnr_vs_adversarial_ref"]) for r in rows)


def test_cloak_replay_gives_identical_report(zero_zone_run):
    resolved = zero_zone_run / "c1" / "run_config.json"
    doc = json.loads(resolved.read_text())
    assert doc["fit"]["rng_seed"] is not None and doc["victim"]["train"]["seed"] is not None
    assert main(["cloak", "--config", str(resolved), "--out", str(zero_zone_run / "c2")]) == 0
    a = (zero_zone_run / "c1" / "dataset" / "cloak_report.csv").read_bytes()
    assert a == (zero_zone_run / "c2" / "dataset" / "cloak_report.csv").read_bytes()
    assert same_dumps(zero_zone_run / "c1" / "renders", zero_zone_run / "c2" / "renders")


def test_eval_reproduces_cloak_report(zero_zone_run):
    run = zero_zone_run / "c1"
    cfg = write_config(zero_zone_run / "eval.json", {
        "scene": str(run / "trained.ply"), "dataset": str(run / "dataset"), "references": str(run / "references"),
        "victim": {"weights": str(run / "surrogate.bin")}, "out": str(zero_zone_run / "ev"),
    })
    assert main(["eval", "--config", cfg]) == 0
    assert (zero_zone_run / "ev" / "cloak_report.csv").read_bytes() == (run / "dataset" / "cloak_report.csv").read_bytes()


def test_cloak_zone_without_texture_exits_2(tmp_path):
    cfg = small_cloak(tmp_path, "z", rules=[{"zone": "rear", "azimuth": 180.0}])
    assert main(["cloak", "--config", cfg]) == 2


def test_cloak_accepts_file_sources_and_custom_zone_names(tmp_path):
    car = car_object()
    save_scene(car.textured("benign"), tmp_path / "benign.ply")
    save_scene(car.textured("stop"), tmp_path / "stop.ply")
    cfg = small_cloak(tmp_path, "files", source={"benign": "benign.ply", "textures": {"stop": "stop.ply"}},
                      rules=[{"zone": "top", "min_elevation": 80.0}], zone_textures={"top": "stop"},
                      fit={"iterations": 5}, victim={"train": {"epochs": 2}})
    assert main(["cloak", "--config", cfg]) == 0
    rows = read_report(tmp_path / "files")
    assert sum(r["zone"] == "top" for r in rows) == 6


# --- dagger


def test_dagger_zero_steps_writes_input_bytes_back(tmp_path):
    scene_path = tmp_path / "desk.ply"
    save_scene(desk_composite("benign"), scene_path)
    cfg = write_config(tmp_path / "d.json", {
        "scene": str(scene_path), "select": {"box": [[-1.2, -0.7, -0.3], [1.2, 0.7, 0.7]]},
        "views": ["e015.0_a018.0"], "budget": {"steps": 0, "label": "person"}, "out": str(tmp_path / "d0"),
    })
    assert main(["dagger", "--config", cfg]) == 0
    assert (tmp_path / "d0" / "attacked.ply").read_bytes() == scene_path.read_bytes()


def test_dagger_desk_fixture_flips_within_budget(tmp_path, capsys):
    doc = json.loads((Path(__file__).resolve().parent.parent / "configs" / "dagger_desk.json").read_text())
    doc["out"] = str(tmp_path / "d1")
    assert main(["dagger", "--config", write_config(tmp_path / "d.json", doc)]) == 0
    assert "flipped=yes" in capsys.readouterr().out
    with open(tmp_path / "d1" / "trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 51
    assert max(float(r["constraint_norm"]) for r in rows) <= 5.0 + 1e-6
    assert rows[-1]["e015.0_a018.0:label"] == "person"


def test_dagger_unknown_view_exits_2(tmp_path):
    cfg = write_config(tmp_path / "d.json", {"views": ["nowhere"], "out": str(tmp_path / "dx")})
    assert main(["dagger", "--config", cfg]) == 2


def test_unknown_procedural_victim_exits_2(tmp_path):
    cfg = write_config(tmp_path / "d.json", {"victim": {"procedural": "other"}, "out": str(tmp_path / "dy")})
    assert main(["dagger", "--config", cfg]) == 2

