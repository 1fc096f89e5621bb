import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crowdsplat.body_model import BodyParams, skin
from crowdsplat.cameras import Camera, orbit_rig
from crowdsplat.pipeline import build_scene_from_config
from crowdsplat.toy_body import toy_body_model


@pytest.fixture(scope="session")
def toy_model():
    return toy_body_model()


@pytest.fixture(scope="session")
def toy_mesh(toy_model):
    return skin(toy_model, BodyParams.rest(toy_model))


def two_person_config():
    return {
        "body_model": "toy",
        "background": [1.0, 1.0, 1.0],
        "persons": [
            {
                "person_id": "a",
                "root_translation": [-0.45, 0.0, 0.0],
                "color": {"kind": "flat", "rgb": [0.8, 0.25, 0.2]},
            },
            {
                "person_id": "b",
                "root_translation": [0.5, 0.1, 0.0],
                "color": {
                    "kind": "checker",
                    "rgb_a": [0.2, 0.3, 0.8],
                    "rgb_b": [0.9, 0.8, 0.3],
                },
            },
        ],
    }


@pytest.fixture()
def two_person_scene():
    scene, meshes, params, model = build_scene_from_config(two_person_config())
    return scene, meshes, params, model


def frontal_camera(size: int = 32, fx: float = 28.0) -> Camera:
    """Camera at the origin looking down +z, for flat packed test scenes."""
    return Camera(
        fx=fx,
        fy=fx,
        cx=(size - 1) / 2.0,
        cy=(size - 1) / 2.0,
        rotation=np.eye(3),
        translation=np.zeros(3),
        width=size,
        height=size,
    )


def body_rig(n=4, size=48, radius=2.6, fx=64.0):
    return orbit_rig(n, radius, elevation=0.5, look_at=(0.0, 0.0, 1.2), fx=fx, size=(size, size))
