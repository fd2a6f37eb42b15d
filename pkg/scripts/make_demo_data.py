"""Regenerate the committed files under data/."""

from pathlib import Path

import numpy as np

from splatattack.core_math import SH_C0, SH_C1
from splatattack.scene import Scene, look_at_camera, save_cameras, save_scene

DATA = Path(__file__).resolve().parent.parent / "data"


def sh_demo_scene() -> Scene:
    # Gray (0.5) seen from +x, green (0.2, 0.7, 0.2) seen from -x.
    sh = np.zeros((1, 16, 3))
    sh[0, 0] = np.array([-0.15, 0.1, -0.15]) / SH_C0
    sh[0, 3] = np.array([0.15, -0.1, 0.15]) / SH_C1
    return Scene(np.zeros((1, 3)), sh, np.full((1, 3), np.log(4.0)), np.array([[1.0, 0, 0, 0]]), np.array([20.0]))


def main() -> None:
    DATA.mkdir(exist_ok=True)
    save_scene(sh_demo_scene(), DATA / "sh_demo.ply")
    save_cameras([look_at_camera("plus_x", (3.0, 0, 0), width=8, height=8),
                  look_at_camera("minus_x", (-3.0, 0, 0), width=8, height=8)], DATA / "sh_demo_cameras.json")
    save_cameras([look_at_camera("front", (4.0, 0, 1.0)),
                  look_at_camera("side", (0, 4.0, 1.0)),
                  look_at_camera("top", (0.3, 0, 4.0), up=(1.0, 0, 0))], DATA / "cameras_example.json")


if __name__ == "__main__":
    main()
