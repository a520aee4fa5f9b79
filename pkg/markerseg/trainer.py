"""
Staged training with step-wise learning-rate control.

A stage runs momentum SGD on one loss until the training loss stops improving after
``max_divisions`` learning-rate divisions (or until ``max_epochs``), then restores
its best-loss parameters. Method variants are sequences of stages; the two-step
recipe trains equally-weighted cross-entropy first and continues from that model
with equally-weighted focal loss.
"""
import copy
import os
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
import torch
from pydantic import BaseModel
from torch.utils.data import DataLoader
from torch.utils.data import Dataset

from markerseg.eval_metrics import per_class_iou
from markerseg.losses import loss_from_spec
from markerseg.pipeline import FrameDataset
from markerseg.unet_model import Model
from markerseg.unet_model import build_model
from markerseg.unet_model import load_checkpoint
from markerseg.unet_model import save_checkpoint
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import DivergenceError
from markerseg.utils.file_utils import write_csv_file
from markerseg.utils.file_utils import write_json_file
from markerseg.utils.models.data_models import ClassWeights
from markerseg.utils.models.data_models import EpochRecord
from markerseg.utils.models.data_models import LossKind
from markerseg.utils.models.data_models import LossSpec
from markerseg.utils.models.data_models import MethodVariant
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.data_models import TrainHistory
from markerseg.utils.models.data_models import TrainingStage
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.settings_model import EnhanceConfig
from markerseg.utils.models.settings_model import ModelConfig
from markerseg.utils.models.settings_model import TrainConfig

trainer_logger = logger.bind(module='Trainer')

HISTORY_CSV_HEADER = ['epoch', 'stage', 'lr', 'loss']


class TrainState(BaseModel):
    epoch: int = 0
    lr: float
    divisions: int = 0
    losses: List[float] = []
    # index into `losses` where the current learning rate took effect
    lr_changed_at: int = 0
    best_loss: Optional[float] = None
    finished: bool = False


class StageRecipe(BaseModel):
    kind: LossKind
    foreground_weight: float = 1.0


class TrainOutcome:
    """Result of a multi-stage run: final model, full history and each stage's best model."""

    def __init__(self, model: Model, history: TrainHistory, stage_models: Dict[TrainingStage, Model]):
        self.model = model
        self.history = history
        self.stage_models = stage_models


RECIPES: Dict[MethodVariant, List[StageRecipe]] = {
    MethodVariant.EWF: [StageRecipe(kind=LossKind.CROSS_ENTROPY), StageRecipe(kind=LossKind.FOCAL)],
    MethodVariant.W50: [StageRecipe(kind=LossKind.CROSS_ENTROPY, foreground_weight=50.0)],
    MethodVariant.FOCAL_SCRATCH: [StageRecipe(kind=LossKind.FOCAL)],
    MethodVariant.EW_ONLY: [StageRecipe(kind=LossKind.CROSS_ENTROPY)],
    MethodVariant.WF50: [
        StageRecipe(kind=LossKind.CROSS_ENTROPY, foreground_weight=50.0),
        StageRecipe(kind=LossKind.FOCAL, foreground_weight=50.0),
    ],
}

STAGES = (TrainingStage.STAGE1, TrainingStage.STAGE2)


def weighted_ce_recipe(foreground_weight: float) -> List[StageRecipe]:
    """Single-stage weighted cross-entropy, the recipe of the class-weight sweep."""
    return [StageRecipe(kind=LossKind.CROSS_ENTROPY, foreground_weight=foreground_weight)]


def recipe_loss_spec(recipe: StageRecipe, n_classes: int, cfg: TrainConfig) -> LossSpec:
    return LossSpec(
        kind=recipe.kind,
        weights=ClassWeights.foreground(n_classes, recipe.foreground_weight),
        reduction=cfg.reduction,
        detach_focal_factor=cfg.detach_focal_factor,
    )


def detect_plateau(losses: Sequence[float], window: int, min_rel_improvement: float) -> bool:
    """
    True when the moving-average loss improved by less than `min_rel_improvement`
    (relative) across the last `window` epochs. Shorter histories never plateau.

    The average runs over `window // 2` epochs, taken at the oldest and at the newest
    end of the window, so a window of 2 or 3 compares single epochs.
    """
    if window < 2 or len(losses) < window:
        return False
    span = window // 2
    recent = losses[-window:]
    earlier = float(np.mean(recent[:span]))
    latest = float(np.mean(recent[-span:]))
    if earlier == 0:
        return True
    return (earlier - latest) / abs(earlier) < min_rel_improvement


def epoch_seed(seed: int, stage: TrainingStage, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage), epoch]).generate_state(1)[0])


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group['lr'] = lr


def _state_snapshot(model: Model) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.network.state_dict().items()}


def _run_epoch(
    model: Model,
    loader: DataLoader,
    loss_fn: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    dropout_seed: int,
) -> float:
    total = 0.0
    count = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(dropout_seed)
        for images, targets in loader:
            targets = targets.to(model.device)
            optimizer.zero_grad()
            loss = loss_fn(model.logits_tensor(images, train_mode=True), targets)
            if not torch.isfinite(loss):
                return float('nan')
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * images.shape[0]
            count += images.shape[0]
    return total / count


def _validation_iou(model: Model, data: Dataset) -> List[float]:
    rows = []
    for index in range(len(data)):
        image, labels = data[index]
        _, seg = model.predict(image[0].numpy().astype(np.float64))
        rows.append(per_class_iou(seg, labels.numpy(), model.config.n_classes))
    return [float(v) for v in np.mean(np.array(rows), axis=0)]


def _checkpoint_path(checkpoint_dir: Optional[str], name: str) -> Optional[str]:
    return os.path.join(checkpoint_dir, name) if checkpoint_dir else None


def train_stage(
    model: Model,
    data: Dataset,
    loss_spec: LossSpec,
    cfg: TrainConfig,
    stage: TrainingStage = TrainingStage.STAGE1,
    checkpoint_dir: Optional[str] = None,
    validation: Optional[Dataset] = None,
    resume_from: Optional[str] = None,
) -> Tuple[Model, TrainHistory]:
    """
    Trains one stage and returns the model restored to its best-loss parameters.

    Batches are shuffled with a generator seeded per epoch and dropout draws from a
    per-epoch seed, so a run is reproducible and can resume mid-stage from the
    ``{stage}_last.pt`` checkpoint.

    Args:
        model: Model to train in place.
        data: Dataset of ``(image[1, H, W], labels[H, W])`` pairs.
        loss_spec: Loss of this stage.
        cfg: Optimizer and schedule settings.
        stage: Stage tag recorded in history and checkpoints.
        checkpoint_dir: Where to write ``{stage}_last.pt`` every epoch and
            ``{stage}.pt`` (best) at the end; None keeps everything in memory.
        validation: Optional held-out frames scored with per-class IoU every epoch.
        resume_from: A ``{stage}_last.pt`` checkpoint to continue from.

    Returns:
        Tuple[Model, TrainHistory]: The best-loss model and this stage's history.

    Raises:
        ContractError: If `data` is empty.
        DivergenceError: If the loss becomes non-finite; the best finite parameters
            are written to ``{stage}_diverged.pt`` when a checkpoint directory is set.
    """
    if len(data) == 0:
        raise ContractError('training data is empty')

    loss_fn = loss_from_spec(loss_spec).to(model.device)
    optimizer = torch.optim.SGD(model.network.parameters(), lr=cfg.lr0, momentum=cfg.momentum)
    state = TrainState(lr=cfg.lr0)
    history = TrainHistory()
    if resume_from is not None:
        restored, payload = load_checkpoint(resume_from, model.config.device)
        model.network.load_state_dict(restored.network.state_dict())
        if payload.get('optimizer'):
            optimizer.load_state_dict(payload['optimizer'])
        trainer_payload = payload.get('trainer_state') or {}
        state = TrainState.parse_obj(trainer_payload.get('state', {'lr': cfg.lr0}))
        history = TrainHistory.parse_obj(trainer_payload.get('history', {}))
    _set_lr(optimizer, state.lr)

    best_params = _state_snapshot(model)
    if state.best_loss is not None and resume_from is not None:
        best_path = _checkpoint_path(checkpoint_dir, f'{stage.value}_best_params.pt')
        if best_path and os.path.exists(best_path):
            best_params = load_checkpoint(best_path, model.config.device)[0].network.state_dict()

    stage_number = STAGES.index(stage) + 1
    while not state.finished and state.epoch < cfg.max_epochs:
        seed = epoch_seed(cfg.seed, stage, state.epoch)
        loader = DataLoader(
            data,
            batch_size=cfg.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(seed),
            num_workers=cfg.num_workers,
        )
        loss = _run_epoch(model, loader, loss_fn, optimizer, seed + 1)
        if not np.isfinite(loss):
            model.network.load_state_dict(best_params)
            path = _checkpoint_path(checkpoint_dir, f'{stage.value}_diverged.pt')
            if path:
                save_checkpoint(path, model, stage)
            trainer_logger.error('Loss diverged at epoch {} of {}', state.epoch, stage.value)
            raise DivergenceError(
                'training loss became non-finite', path,
                {'epoch': state.epoch, 'stage': stage.value, 'lr': state.lr},
            )

        val_iou = _validation_iou(model, validation) if validation is not None and len(validation) else None
        history.records.append(EpochRecord(
            epoch=state.epoch, stage=stage_number, lr=state.lr, loss=loss, val_iou=val_iou,
        ))
        trainer_logger.bind(epoch=state.epoch, stage=stage_number, lr=state.lr, loss=loss).info(
            'Epoch {} finished with loss {:.6g}', state.epoch, loss,
        )
        state.losses.append(loss)
        if state.best_loss is None or loss < state.best_loss:
            state.best_loss = loss
            best_params = _state_snapshot(model)
            best_path = _checkpoint_path(checkpoint_dir, f'{stage.value}_best_params.pt')
            if best_path:
                save_checkpoint(best_path, model, stage)

        if detect_plateau(state.losses[state.lr_changed_at:], cfg.plateau.window, cfg.plateau.min_rel_improvement):
            if state.divisions >= cfg.max_divisions:
                state.finished = True
            else:
                state.lr = state.lr / cfg.lr_divisor
                state.divisions += 1
                state.lr_changed_at = len(state.losses)
                _set_lr(optimizer, state.lr)
                trainer_logger.info('Loss plateaued, learning rate divided to {:.3g}', state.lr)
        state.epoch += 1

        last_path = _checkpoint_path(checkpoint_dir, f'{stage.value}_last.pt')
        if last_path:
            save_checkpoint(
                last_path, model, stage, optimizer.state_dict(),
                {'state': state.dict(), 'history': history.dict()},
            )

    model.network.load_state_dict(best_params)
    final_path = _checkpoint_path(checkpoint_dir, f'{stage.value}.pt')
    if final_path:
        save_checkpoint(final_path, model, stage)
    trainer_logger.success(
        '{} finished after {} epochs, best loss {:.6g}, {} lr divisions',
        stage.value, state.epoch, state.best_loss, state.divisions,
    )
    return model, history


def _copy_model(model: Model) -> Model:
    return Model(model.config, model.seed, copy.deepcopy(model.network))


def run_recipe(
    model: Model,
    data: Dataset,
    recipe: List[StageRecipe],
    cfg: TrainConfig,
    checkpoint_dir: Optional[str] = None,
    validation: Optional[Dataset] = None,
) -> TrainOutcome:
    """Runs the stages of a recipe back to back, each starting from the previous stage's best model."""
    if not recipe:
        raise ConfigError('a training recipe needs at least one stage')
    if len(recipe) > len(STAGES):
        raise ConfigError('a training recipe has at most two stages', {'stages': len(recipe)})
    if not cfg.enable_stage2:
        recipe = recipe[:1]
    history = TrainHistory()
    stage_models: Dict[TrainingStage, Model] = {}
    for stage, stage_recipe in zip(STAGES, recipe):
        spec = recipe_loss_spec(stage_recipe, model.config.n_classes, cfg)
        trainer_logger.info(
            'Starting {} with {} loss, foreground weight {}',
            stage.value, spec.kind.value, stage_recipe.foreground_weight,
        )
        model, stage_history = train_stage(model, data, spec, cfg, stage, checkpoint_dir, validation)
        history = history.extend(stage_history)
        stage_models[stage] = _copy_model(model)
    return TrainOutcome(model, history, stage_models)


def train_two_step(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    checkpoint_dir: Optional[str] = None,
) -> Tuple[Model, TrainHistory]:
    """Equally-weighted cross-entropy, then equally-weighted focal loss from that model."""
    outcome = run_recipe(model, data, RECIPES[MethodVariant.EWF], cfg, checkpoint_dir)
    return outcome.model, outcome.history


def train_variant(
    variant: MethodVariant,
    data: Dataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    checkpoint_dir: Optional[str] = None,
    validation: Optional[Dataset] = None,
) -> TrainOutcome:
    """Builds a fresh model seeded by ``cfg.seed`` and trains it with the variant's recipe."""
    model = build_model(model_cfg, seed=cfg.seed)
    return run_recipe(model, data, RECIPES[variant], cfg, checkpoint_dir, validation)


def make_datasets(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    enhance_cfg: Optional[EnhanceConfig] = None,
) -> Tuple[FrameDataset, Optional[FrameDataset]]:
    """
    Train dataset and, when ``validation_fraction > 0``, a validation dataset made of
    whole train setups held out by a seeded draw.
    """
    if cfg.validation_fraction <= 0:
        return FrameDataset(manifest, Split.TRAIN, enhance_cfg), None
    train = manifest.split(Split.TRAIN)
    setups = sorted({e.setup_id for e in train})
    n_val = max(1, int(round(cfg.validation_fraction * len(setups))))
    if n_val >= len(setups):
        raise ConfigError(
            'validation_fraction leaves no train setups', {'validation_fraction': cfg.validation_fraction},
        )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, len(setups)]))
    held_out = {int(s) for s in rng.choice(setups, size=n_val, replace=False)}
    train_manifest = manifest.copy(update={'frames': [e for e in train if e.setup_id not in held_out]})
    val_manifest = manifest.copy(update={'frames': [e for e in train if e.setup_id in held_out]})
    return (
        FrameDataset(train_manifest, Split.TRAIN, enhance_cfg),
        FrameDataset(val_manifest, Split.TRAIN, enhance_cfg),
    )


def write_history(history: TrainHistory, out_dir: str, stem: str = 'history') -> Tuple[str, str]:
    csv_path = write_csv_file(
        os.path.join(out_dir, f'{stem}.csv'),
        HISTORY_CSV_HEADER,
        ([r.epoch, r.stage, r.lr, r.loss] for r in history.records),
    )
    json_path = write_json_file(out_dir, f'{stem}.json', history.dict(), trainer_logger)
    return csv_path, json_path
