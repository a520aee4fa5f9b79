import os

import numpy as np
import pytest

import markerseg
from markerseg.synth_fluoro import generate_dataset
from markerseg.utils.models.settings_model import ModelConfig
from markerseg.utils.models.settings_model import SceneConfig
from markerseg.utils.models.settings_model import SplitRule


def small_scene(**overrides) -> SceneConfig:
    values = dict(
        width=128,
        height=128,
        n_setups=3,
        view_angles=[-30.0, 30.0],
        fraction_scale=8.0,
        min_foreshortening=0.6,
        dropped_setups=0,
        missing_frames=0,
        seed=3,
    )
    values.update(overrides)
    return SceneConfig(**values)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(n_blocks=1, base_channels=2, width=128, height=128)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def scene_cfg():
    return small_scene()


@pytest.fixture(scope='session')
def small_dataset(tmp_path_factory):
    """Three setups at two view angles; setup split 2 train / 1 test."""
    out_dir = str(tmp_path_factory.mktemp('dataset'))
    return generate_dataset(small_scene(), SplitRule(n_test_setups=1), out_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def desk_config_path() -> str:
    """The shipped desk-scale experiment config."""
    return os.path.join(os.path.dirname(os.path.dirname(markerseg.__file__)), 'config', 'experiments', 'desk.json')
