import os

import numpy as np
import pytest
import torch
from torch import nn
from torch.utils.data import TensorDataset

from markerseg.eval_metrics import ModelSegmenter
from markerseg.eval_metrics import evaluate_dataset
from markerseg.expcli import load_experiment_config
from markerseg.synth_fluoro import generate_dataset
from markerseg.tests.conftest import desk_config_path
from markerseg.tests.conftest import tiny_model_config
from markerseg.trainer import HISTORY_CSV_HEADER
from markerseg.trainer import RECIPES
from markerseg.trainer import StageRecipe
from markerseg.trainer import detect_plateau
from markerseg.trainer import make_datasets
from markerseg.trainer import recipe_loss_spec
from markerseg.trainer import run_recipe
from markerseg.trainer import train_stage
from markerseg.trainer import train_two_step
from markerseg.trainer import train_variant
from markerseg.trainer import weighted_ce_recipe
from markerseg.trainer import write_history
from markerseg.unet_model import Model
from markerseg.unet_model import build_model
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import DivergenceError
from markerseg.utils.models.data_models import ClassWeights
from markerseg.utils.models.data_models import LossKind
from markerseg.utils.models.data_models import LossSpec
from markerseg.utils.models.data_models import MethodVariant
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.data_models import TrainingStage
from markerseg.utils.models.settings_model import ModelConfig
from markerseg.utils.models.settings_model import PlateauConfig
from markerseg.utils.models.settings_model import TrainConfig

CE = LossSpec(kind=LossKind.CROSS_ENTROPY, weights=ClassWeights.equal(6))


def toy_model() -> Model:
    """A single 1x1 convolution over one-pixel images."""
    torch.manual_seed(0)
    return Model(ModelConfig(n_blocks=1, base_channels=1, width=1, height=1), 0, nn.Conv2d(1, 6, 1))


def toy_data() -> TensorDataset:
    images = torch.tensor([0.0, 1.0]).reshape(2, 1, 1, 1)
    targets = torch.tensor([2, 4]).reshape(2, 1, 1)
    return TensorDataset(images, targets)


def noise_data(n: int = 4, size: int = 16, seed: int = 0) -> TensorDataset:
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.uniform(0, 1, (n, 1, size, size)).astype(np.float32))
    targets = torch.from_numpy(rng.integers(0, 6, (n, size, size)))
    return TensorDataset(images, targets)


@pytest.mark.parametrize('losses, window, expected', [
    ([8.0, 4.0, 2.0, 1.0], 3, False),
    ([1.0, 1.0, 1.0], 3, True),
    ([1.0, 0.999, 0.9985], 3, True),
    ([1.0, 1.0], 3, False),
    ([1.0, 0.9, 1.0, 0.9], 4, True),
    ([1.0, 1.0, 0.5, 0.5], 4, False),
    ([5.0, 1.0, 0.9, 1.0, 0.9], 4, True),
])
def test_detect_plateau(losses, window, expected):
    assert detect_plateau(losses, window, 0.005) is expected


def test_toy_problem_converges():
    cfg = TrainConfig(lr0=0.1, momentum=0.9, max_epochs=300, plateau=PlateauConfig(window=50, min_rel_improvement=0.0))
    model, history = train_stage(toy_model(), toy_data(), CE, cfg)
    losses = history.losses()
    assert losses[-1] < 0.05
    assert losses[-1] < losses[0] / 10
    _, seg = model.predict(np.zeros((1, 1)))
    assert seg.ids[0, 0] == 2
    _, seg = model.predict(np.ones((1, 1)))
    assert seg.ids[0, 0] == 4


def test_zero_learning_rate_plateaus_and_stops():
    model = toy_model()
    before = {k: v.clone() for k, v in model.network.state_dict().items()}
    cfg = TrainConfig(lr0=0.0, max_divisions=2, max_epochs=100, plateau=PlateauConfig(window=2))
    model, history = train_stage(model, toy_data(), CE, cfg)
    # a plateau every two epochs: two divisions, then the third plateau ends the stage
    assert len(history.records) == 6
    assert len(set(history.losses())) == 1
    for key, value in model.network.state_dict().items():
        assert torch.equal(value, before[key])


def test_training_is_reproducible():
    cfg = TrainConfig(batch_size=2, lr0=0.05, max_epochs=3, seed=7)
    runs = []
    for _ in range(2):
        model = build_model(tiny_model_config(width=16, height=16), seed=1)
        model, history = train_stage(model, noise_data(), CE, cfg)
        runs.append((history.losses(), model.network.state_dict()))
    assert runs[0][0] == runs[1][0]
    for key, value in runs[0][1].items():
        assert torch.equal(value, runs[1][1][key])


def test_resumed_stage_matches_uninterrupted_run(tmp_path):
    cfg = TrainConfig(batch_size=2, lr0=0.05, max_epochs=4, seed=3)
    full_model = build_model(tiny_model_config(width=16, height=16), seed=2)
    _, full = train_stage(full_model, noise_data(), CE, cfg)

    checkpoint_dir = str(tmp_path / 'ckpt')
    first = build_model(tiny_model_config(width=16, height=16), seed=2)
    train_stage(first, noise_data(), CE, cfg.copy(update={'max_epochs': 2}), checkpoint_dir=checkpoint_dir)
    resumed = build_model(tiny_model_config(width=16, height=16), seed=2)
    _, history = train_stage(
        resumed, noise_data(), CE, cfg, checkpoint_dir=checkpoint_dir,
        resume_from=os.path.join(checkpoint_dir, 'stage1_last.pt'),
    )
    assert [r.epoch for r in history.records] == [0, 1, 2, 3]
    assert history.losses() == pytest.approx(full.losses(), rel=1e-6)


def test_divergence_keeps_last_finite_parameters(tmp_path):
    images = torch.tensor([0.0, float('nan')]).reshape(2, 1, 1, 1)
    data = TensorDataset(images, torch.tensor([2, 4]).reshape(2, 1, 1))
    checkpoint_dir = str(tmp_path / 'ckpt')
    with pytest.raises(DivergenceError) as info:
        train_stage(toy_model(), data, CE, TrainConfig(lr0=0.1), checkpoint_dir=checkpoint_dir)
    assert info.value.checkpoint_path == os.path.join(checkpoint_dir, 'stage1_diverged.pt')
    assert os.path.exists(info.value.checkpoint_path)


def test_empty_training_data():
    empty = TensorDataset(torch.zeros(0, 1, 1, 1), torch.zeros(0, 1, 1, dtype=torch.int64))
    with pytest.raises(ContractError):
        train_stage(toy_model(), empty, CE, TrainConfig())


def test_recipes():
    cfg = TrainConfig()
    assert RECIPES[MethodVariant.W50] == weighted_ce_recipe(50.0)
    w50 = recipe_loss_spec(RECIPES[MethodVariant.W50][0], 6, cfg)
    assert w50.weights.w == [1.0] + [50.0] * 5

    stage1, stage2 = (recipe_loss_spec(r, 6, cfg) for r in RECIPES[MethodVariant.EWF])
    assert stage1.kind == LossKind.CROSS_ENTROPY and stage2.kind == LossKind.FOCAL
    assert stage1.weights.w == stage2.weights.w == [1.0] * 6

    wf50 = recipe_loss_spec(RECIPES[MethodVariant.WF50][1], 6, cfg)
    assert wf50.kind == LossKind.FOCAL
    assert wf50.weights.w == [1.0] + [50.0] * 5
    assert RECIPES[MethodVariant.EW_ONLY] == RECIPES[MethodVariant.EWF][:1]
    assert RECIPES[MethodVariant.FOCAL_SCRATCH] == [StageRecipe(kind=LossKind.FOCAL)]


def test_two_stage_recipe_records_both_stages(tmp_path):
    cfg = TrainConfig(lr0=0.1, max_epochs=2)
    outcome = run_recipe(toy_model(), toy_data(), RECIPES[MethodVariant.EWF], cfg, checkpoint_dir=str(tmp_path))
    assert [r.stage for r in outcome.history.records] == [1, 1, 2, 2]
    assert set(outcome.stage_models) == {TrainingStage.STAGE1, TrainingStage.STAGE2}
    assert os.path.exists(str(tmp_path / 'stage1.pt'))
    assert os.path.exists(str(tmp_path / 'stage2.pt'))


def test_stage2_can_be_disabled():
    cfg = TrainConfig(lr0=0.1, max_epochs=2, enable_stage2=False)
    outcome = run_recipe(toy_model(), toy_data(), RECIPES[MethodVariant.EWF], cfg)
    assert [r.stage for r in outcome.history.records] == [1, 1]
    assert set(outcome.stage_models) == {TrainingStage.STAGE1}


def test_recipe_length_is_checked():
    with pytest.raises(ConfigError):
        run_recipe(toy_model(), toy_data(), [], TrainConfig())
    with pytest.raises(ConfigError):
        run_recipe(toy_model(), toy_data(), weighted_ce_recipe(2.0) * 3, TrainConfig())


def test_validation_iou_is_recorded():
    cfg = TrainConfig(lr0=0.1, max_epochs=2)
    _, history = train_stage(toy_model(), toy_data(), CE, cfg, validation=toy_data())
    assert all(len(r.val_iou) == 6 for r in history.records)


def test_make_datasets_holds_out_whole_setups(small_dataset):
    train, validation = make_datasets(small_dataset, TrainConfig())
    assert len(train) == 4 and validation is None

    train, validation = make_datasets(small_dataset, TrainConfig(validation_fraction=0.5))
    assert len(train) == 2 and len(validation) == 2
    train_setups = {e.setup_id for e in train.entries}
    val_setups = {e.setup_id for e in validation.entries}
    assert len(train_setups) == len(val_setups) == 1
    assert not train_setups & val_setups

    with pytest.raises(ConfigError):
        make_datasets(small_dataset, TrainConfig(validation_fraction=0.9))


def test_write_history(tmp_path):
    cfg = TrainConfig(lr0=0.1, max_epochs=3)
    _, history = train_stage(toy_model(), toy_data(), CE, cfg)
    csv_path, json_path = write_history(history, str(tmp_path))
    with open(csv_path) as f:
        lines = f.read().splitlines()
    assert lines[0] == ','.join(HISTORY_CSV_HEADER)
    assert len(lines) == 4
    assert os.path.exists(json_path)


def test_two_step_matches_the_ewf_recipe():
    cfg = TrainConfig(lr0=0.1, max_epochs=3)
    model, history = train_two_step(toy_model(), toy_data(), cfg)
    outcome = run_recipe(toy_model(), toy_data(), RECIPES[MethodVariant.EWF], cfg)
    assert {r.stage for r in history.records} == {1, 2}
    assert history.losses() == outcome.history.losses()
    for key, value in model.network.state_dict().items():
        assert torch.equal(value, outcome.model.network.state_dict()[key])


def test_train_variant_dispatches_recipes():
    model_cfg = tiny_model_config(width=16, height=16)
    cfg = TrainConfig(batch_size=2, lr0=0.05, max_epochs=2, seed=4)
    runs = {
        variant: train_variant(variant, noise_data(), cfg, model_cfg)
        for variant in (MethodVariant.W50, MethodVariant.WF50, MethodVariant.EW_ONLY)
    }
    assert [r.stage for r in runs[MethodVariant.W50].history.records] == [1, 1]
    assert [r.stage for r in runs[MethodVariant.WF50].history.records] == [1, 1, 2, 2]
    assert [r.stage for r in runs[MethodVariant.EW_ONLY].history.records] == [1, 1]
    assert set(runs[MethodVariant.W50].stage_models) == {TrainingStage.STAGE1}
    assert set(runs[MethodVariant.WF50].stage_models) == {TrainingStage.STAGE1, TrainingStage.STAGE2}
    # same seed, same data order: only the class weights separate these runs
    assert runs[MethodVariant.WF50].history.losses()[:2] == runs[MethodVariant.W50].history.losses()
    assert runs[MethodVariant.W50].history.losses()[0] != runs[MethodVariant.EW_ONLY].history.losses()[0]


@pytest.mark.slow
def test_two_step_recovers_markers_on_desk_benchmark(tmp_path):
    cfg = load_experiment_config(desk_config_path())
    manifest = generate_dataset(cfg.scene, cfg.split, str(tmp_path / 'dataset'))
    assert len(manifest.split(Split.TRAIN)) == 200 and len(manifest.split(Split.TEST)) == 50
    data, _ = make_datasets(manifest, cfg.train)

    def foreground_miou(model) -> np.ndarray:
        return np.array(evaluate_dataset(ModelSegmenter(model), manifest).per_class_miou[1:])

    collapse, lift, ewf_wins = [], [], 0
    for seed in (0, 1, 2):
        train_cfg = cfg.train.copy(update={'seed': seed})
        ewf = train_variant(MethodVariant.EWF, data, train_cfg, cfg.model)
        ew_only = train_variant(MethodVariant.EW_ONLY, data, train_cfg, cfg.model)
        w50 = train_variant(MethodVariant.W50, data, train_cfg, cfg.model)
        ewf_iou = foreground_miou(ewf.model)
        collapse.append(foreground_miou(ew_only.model).mean())
        lift.append(ewf_iou.mean() - foreground_miou(ewf.stage_models[TrainingStage.STAGE1]).mean())
        ewf_wins += int(np.count_nonzero(ewf_iou >= foreground_miou(w50.model)) >= 3)
    assert np.mean(collapse) < 0.25
    assert np.mean(lift) >= 0.2
    assert ewf_wins >= 2
