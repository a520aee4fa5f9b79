import numpy as np
import pytest
import torch

from markerseg.core_types import check_simplex
from markerseg.tests.conftest import tiny_model_config
from markerseg.unet_model import CHECKPOINT_FORMAT_VERSION
from markerseg.unet_model import build_model
from markerseg.unet_model import contracting_channels
from markerseg.unet_model import load_checkpoint
from markerseg.unet_model import param_count
from markerseg.unet_model import save_checkpoint
from markerseg.utils.exceptions import ArtifactIOError
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.models.data_models import TrainingStage
from markerseg.utils.models.settings_model import ModelConfig


def test_smallest_network_parameter_count():
    cfg = ModelConfig(n_blocks=1, base_channels=1, in_channels=1, n_classes=6, width=16, height=16)
    assert param_count(cfg) == 128
    assert build_model(cfg).parameter_count() == 128


@pytest.mark.parametrize('n_blocks', [1, 2, 3, 4, 5, 6])
def test_closed_form_count_matches_network(n_blocks):
    cfg = ModelConfig(n_blocks=n_blocks, base_channels=2, width=64, height=64)
    assert build_model(cfg).parameter_count() == param_count(cfg)


def test_channels_double_with_depth():
    model = build_model(ModelConfig(n_blocks=3, base_channels=4, width=32, height=32))
    assert contracting_channels(model) == [4, 8, 16, 32]


@pytest.mark.parametrize('n_blocks', [1, 2, 3])
def test_prediction_shapes_and_partition(n_blocks, rng):
    model = build_model(tiny_model_config(n_blocks=n_blocks, width=32, height=32))
    image = rng.uniform(0, 1, (32, 32))
    assert model.forward(image).layers.shape == (32, 32, 6)
    probabilities, seg = model.predict(image)
    check_simplex(probabilities.layers)
    assert seg.ids.shape == (32, 32)
    assert seg.ids.min() >= 0 and seg.ids.max() <= 5


def test_input_size_is_checked(rng):
    model = build_model(tiny_model_config(width=32, height=32))
    with pytest.raises(ShapeError):
        model.forward(rng.uniform(0, 1, (32, 16)))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(n_blocks=3, width=20, height=32))


def test_initialization_is_seeded_and_truncated():
    cfg = tiny_model_config(width=16, height=16)
    a = build_model(cfg, seed=5)
    b = build_model(cfg, seed=5)
    c = build_model(cfg, seed=6)
    for (name, pa), pb, pc in zip(a.network.named_parameters(), b.network.parameters(), c.network.parameters()):
        assert torch.equal(pa, pb)
        if name.endswith('bias'):
            assert torch.all(pa == 0.1)
        else:
            assert float(pa.abs().max()) <= 0.2 + 1e-6
            assert not torch.equal(pa, pc)


def test_inference_is_deterministic_and_dropout_is_not(rng):
    model = build_model(tiny_model_config(width=16, height=16))
    image = rng.uniform(0, 1, (16, 16))
    assert np.array_equal(model.forward(image).layers, model.forward(image).layers)
    first = model.forward(image, train_mode=True).layers
    second = model.forward(image, train_mode=True).layers
    assert not np.array_equal(first, second)


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(tiny_model_config(n_blocks=2, width=16, height=16), seed=11)
    path = save_checkpoint(str(tmp_path / 'ckpt' / 'stage1.pt'), model, TrainingStage.STAGE1)
    restored, payload = load_checkpoint(path)
    assert payload['stage'] == 'stage1'
    assert payload['format_version'] == CHECKPOINT_FORMAT_VERSION
    assert restored.seed == 11
    assert restored.config == model.config
    image = rng.uniform(0, 1, (16, 16))
    assert np.array_equal(restored.forward(image).layers, model.forward(image).layers)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_checkpoint(str(tmp_path / 'missing.pt'))
    path = str(tmp_path / 'future.pt')
    torch.save({'format_version': CHECKPOINT_FORMAT_VERSION + 1}, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path)
