"""Shared fixtures: the default rig and seeded synthetic scenes"""
import numpy as np
import pytest

from app.services.projection import ring_rig
from app.services.synth import SceneSpec, generate_scene
from tests.helpers import car_at


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def rig():
    return ring_rig()


@pytest.fixture(scope="session")
def noiseless_scene():
    """Four cars around the ego, one of them straddling the camera 4/5 seam"""
    boxes = [car_at(0.0, 15.0), car_at(-120.0, 12.0), car_at(90.0, 15.0), car_at(180.0, 20.0)]
    spec = SceneSpec(boxes=len(boxes), ground_points=5000, seed=11, fixed_boxes=boxes)
    return generate_scene(spec)


@pytest.fixture
def small_config(tmp_path):
    """A quick synthetic pipeline config writing under tmp_path"""
    return {
        "io": {"output_dir": str(tmp_path / "out"), "seed": 3},
        "synth": {"boxes": 4, "ground_points": 4000, "sweeps": 3, "label_mix": ["car"],
                  "range": [8.0, 25.0]},
    }
