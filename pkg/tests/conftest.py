import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from ultra.gridworld import SceneConfig, generate_scene, parse_scene  # noqa: E402

SMALL = SceneConfig(width=7, height=7, obstacle_density=0.15, objects_per_class=1, n_classes=2)


@pytest.fixture
def open_room():
    return parse_scene(".....\n.....\n..A..\n.....\n.....\n", n_classes=2, scene_id="room")


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(100 + i, SMALL, f"s{i}") for i in range(3)]


def random_store(spec, rng):
    return {name: rng.normal(size=shape) for name, shape in spec.shapes().items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a complete pipeline in a few seconds
TINY = {
    "hidden": 8, "K": 2, "W": 1, "J": 2, "iterations": 3, "meta_t_max": 10, "G_max": 5,
    "checkpoint_every": 2, "transfer_episodes": 8, "transfer_batch": 4, "curve_every": 4,
    "curve_tasks": 2, "eval_episodes": 3, "T_max": 20, "width": 7, "height": 7,
    "objects_per_class": 1, "C": 2, "n_metatrain": 2, "n_train": 1, "n_val": 1, "n_test": 1,
}
