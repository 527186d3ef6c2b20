"""Procedural benchmark scenes and orbit camera rigs."""

from __future__ import annotations

import math

import numpy as np

from .field import Primitive, SceneSpec
from .geometry import Camera, look_at_pose

REFERENCE_BBOX_MIN = (-1.0, -1.0, -1.0)
REFERENCE_BBOX_MAX = (1.0, 1.0, 1.0)


def reference_scene() -> SceneSpec:
    """Desk-scale tabletop: a ground slab with four colored solids on top.

    Enough occlusion and color variety that a sparse-view fit underdetermines
    the geometry, while staying cheap to rasterize and render.
    """
    return SceneSpec(
        primitives=[
            Primitive("box", (0.0, 0.0, -0.85), (1.9, 1.9, 0.26), (0.55, 0.50, 0.45), 40.0),
            Primitive("sphere", (0.38, 0.22, -0.38), 0.34, (0.85, 0.25, 0.20), 40.0),
            Primitive("box", (-0.45, -0.32, -0.42), (0.50, 0.55, 0.60), (0.20, 0.35, 0.80), 40.0),
            Primitive("sphere", (-0.22, 0.46, -0.54), 0.18, (0.25, 0.70, 0.30), 40.0),
            Primitive("box", (0.12, -0.50, -0.27), (0.24, 0.24, 0.90), (0.90, 0.80, 0.25), 40.0),
        ],
        background_color=(0.92, 0.94, 0.97),
    )


def empty_scene(background=(1.0, 1.0, 1.0)) -> SceneSpec:
    return SceneSpec(primitives=[], background_color=background)


SCENE_PRESETS = {
    "reference": reference_scene,
    "empty": empty_scene,
}


def scene_from_preset(name: str) -> SceneSpec:
    try:
        return SCENE_PRESETS[name]()
    except KeyError:
        known = ", ".join(sorted(SCENE_PRESETS))
        raise ValueError(f"unknown scene preset {name!r}; known presets: {known}") from None


def orbit_cameras(
    count: int,
    radius: float,
    height: float,
    target=(0.0, 0.0, -0.3),
    phase: float = 0.0,
    image_width: int = 64,
    image_height: int = 48,
    focal: float = 64.0,
    near: float = 0.7,
    far: float = 4.2,
) -> list[Camera]:
    """Cameras evenly spaced on a horizontal circle, all looking at the target."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for k in range(count):
        angle = phase + 2.0 * math.pi * k / count
        eye = np.array(
            [radius * math.cos(angle), radius * math.sin(angle), height], dtype=np.float64
        )
        pose = look_at_pose(eye, target)
        cams.append(
            Camera(
                pose,
                focal_x=focal,
                focal_y=focal,
                principal_x=image_width / 2.0,
                principal_y=image_height / 2.0,
                width=image_width,
                height=image_height,
                near=near,
                far=far,
            )
        )
    return cams
