"""
Command-line front end and experiment orchestration.

Every command writes under ``--out-dir`` and records what it produced, with sha256
digests, in ``run_manifest.json``. The process exits non-zero when any requested
operation failed.
"""
import itertools
import json
import os
from functools import wraps
from pathlib import Path
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import typer
from pydantic import BaseModel
from pydantic import ValidationError

import markerseg
from markerseg.eval_metrics import LabelOracle
from markerseg.eval_metrics import ModelSegmenter
from markerseg.eval_metrics import Segmenter
from markerseg.eval_metrics import collect_center_records
from markerseg.eval_metrics import evaluate_dataset
from markerseg.eval_metrics import read_iou_report
from markerseg.eval_metrics import write_centers_csv
from markerseg.eval_metrics import write_iou_report
from markerseg.pipeline import augment
from markerseg.pipeline import load_frame
from markerseg.pipeline import load_manifest
from markerseg.pipeline import materialize
from markerseg.pipeline import save_manifest
from markerseg.settings.config import settings
from markerseg.synth_fluoro import dataset_pixel_fractions
from markerseg.synth_fluoro import generate_dataset
from markerseg.trainer import RECIPES
from markerseg.trainer import make_datasets
from markerseg.trainer import run_recipe
from markerseg.trainer import weighted_ce_recipe
from markerseg.trainer import write_history
from markerseg.unet_model import build_model
from markerseg.unet_model import load_checkpoint
from markerseg.unet_model import save_checkpoint
from markerseg.utils.default_logger import add_console_sinks
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import MarkerSegException
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.file_utils import ensure_dir
from markerseg.utils.file_utils import read_json_file
from markerseg.utils.file_utils import sha256_file
from markerseg.utils.file_utils import sha256_json
from markerseg.utils.file_utils import write_csv_file
from markerseg.utils.file_utils import write_json_file
from markerseg.utils.file_utils import write_png
from markerseg.utils.helper_functions import PeakMemoryMonitor
from markerseg.utils.helper_functions import capture_cell_failure
from markerseg.utils.models.data_models import AugmentKind
from markerseg.utils.models.data_models import GridRow
from markerseg.utils.models.data_models import IoUReport
from markerseg.utils.models.data_models import MethodStats
from markerseg.utils.models.data_models import MethodVariant
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.data_models import TrainingStage
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.manifest_models import RunArtifact
from markerseg.utils.models.manifest_models import RunManifest
from markerseg.utils.models.settings_model import CURRENT_SCHEMA_VERSION
from markerseg.utils.models.settings_model import ExperimentConfig
from markerseg.utils.plot_utils import plot_method_comparison
from markerseg.utils.plot_utils import plot_per_image_iou

cli_logger = logger.bind(module='ExpCLI')

app = typer.Typer(add_completion=False, help='Marker segmentation experiments on synthetic fluoroscopy.')

GRID_RESULT_HEADER_PREFIX = ['cell', 'n_blocks', 'augmentation', 'enhancement', 'recipe', 'seed']

OVERLAY_RED = np.array([255, 0, 0], dtype=np.uint8)
OVERLAY_GREEN = np.array([0, 255, 0], dtype=np.uint8)
OVERLAY_YELLOW = np.array([255, 255, 0], dtype=np.uint8)


# Configuration
def load_experiment_config(path: Optional[str]) -> ExperimentConfig:
    """
    Reads an experiment configuration file; no path gives the defaults.

    Raises:
        ConfigError: If the schema version is unknown or the document does not validate.
    """
    if path is None:
        return ExperimentConfig()
    try:
        data = read_json_file(path, cli_logger)
    except FileNotFoundError as exc:
        raise ConfigError('configuration file not found', {'path': path}) from exc
    version = data.get('schema_version', CURRENT_SCHEMA_VERSION)
    if version != CURRENT_SCHEMA_VERSION:
        raise ConfigError('unsupported config schema version', {'path': path, 'schema_version': version})
    try:
        return ExperimentConfig.parse_obj(data)
    except ValidationError as exc:
        raise ConfigError('invalid experiment configuration', {'path': path, 'errors': exc.errors()}) from exc


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.copy(update={
        'scene': cfg.scene.copy(update={'seed': seed}),
        'train': cfg.train.copy(update={'seed': seed}),
        'grid': cfg.grid.copy(update={'seeds': [seed]}),
    })


def config_hash(cfg: BaseModel) -> str:
    return sha256_json(json.loads(cfg.json()))


# Run bookkeeping
class RunRecorder:
    """Collects produced files and failures and writes ``run_manifest.json``."""

    def __init__(self, out_dir: str, cfg: ExperimentConfig):
        self.out_dir = out_dir
        self.cfg = cfg
        self.artifacts: Dict[str, RunArtifact] = {}
        self.failures: List[str] = []

    def record(self, path: str, kind: str) -> str:
        rel = os.path.relpath(path, self.out_dir)
        self.artifacts[rel] = RunArtifact(path=rel, sha256=sha256_file(path), kind=kind)
        return path

    def fail(self, message: str) -> None:
        self.failures.append(message)

    def write(self, command: str) -> str:
        path = os.path.join(self.out_dir, 'run_manifest.json')
        artifacts = {}
        if os.path.exists(path):
            previous = RunManifest.parse_obj(read_json_file(path, cli_logger))
            artifacts = {a.path: a for a in previous.artifacts}
        artifacts.update(self.artifacts)
        manifest = RunManifest(
            command=command,
            seed=self.cfg.train.seed,
            config_hash=config_hash(self.cfg),
            artifacts=sorted(artifacts.values(), key=lambda a: a.path),
            failures=self.failures,
        )
        return write_json_file(self.out_dir, 'run_manifest.json', json.loads(manifest.json()), cli_logger)


class CliState:
    def __init__(self, cfg: ExperimentConfig, out_dir: str, force: bool):
        self.cfg = cfg
        self.out_dir = out_dir
        self.force = force
        self.recorder = RunRecorder(out_dir, cfg)


def cli_command(fn):
    """
    Wraps a command so domain errors end the process with exit code 1 after the
    run manifest has been written.
    """
    @wraps(fn)
    def wrapper(ctx: typer.Context, *args, **kwargs):
        state: CliState = ctx.obj
        failed = False
        try:
            failed = bool(fn(ctx, *args, **kwargs))
        except MarkerSegException as e:
            cli_logger.opt(exception=settings.logs.trace_enabled).error(
                '{} failed: {}', fn.__name__, e,
            )
            state.recorder.fail(f'{fn.__name__}: {e}')
            failed = True
        finally:
            state.recorder.write(fn.__name__)
        if failed:
            raise typer.Exit(code=1)
    return wrapper


# Grid
class GridCell(BaseModel):
    name: str
    axes: Dict[str, str]
    n_blocks: int
    augmentation: AugmentKind
    enhancement: bool
    method: Optional[MethodVariant] = None
    weight: Optional[float] = None
    seed: int


def grid_cells(cfg: ExperimentConfig) -> List[GridCell]:
    """Expands the grid axes into cells, sorted by name."""
    axes = cfg.grid
    recipes = [('method', m) for m in axes.method] + [('weight', w) for w in axes.weight]
    cells = []
    for n_blocks, aug, enh, (recipe_kind, recipe), seed in itertools.product(
        axes.n_blocks, axes.augmentation, axes.enhancement, recipes, axes.seeds,
    ):
        recipe_name = f'wce{recipe:g}' if recipe_kind == 'weight' else recipe.value
        name = f'b{n_blocks}_{aug.value}_{"enh" if enh else "raw"}_{recipe_name}_s{seed}'
        cells.append(GridCell(
            name=name,
            axes={
                'n_blocks': str(n_blocks), 'augmentation': aug.value, 'enhancement': str(enh),
                'recipe': recipe_name, 'seed': str(seed),
            },
            n_blocks=n_blocks,
            augmentation=aug,
            enhancement=enh,
            method=recipe if recipe_kind == 'method' else None,
            weight=recipe if recipe_kind == 'weight' else None,
            seed=seed,
        ))
    return sorted(cells, key=lambda c: c.name)


def cell_config(cfg: ExperimentConfig, cell: GridCell) -> ExperimentConfig:
    return cfg.copy(update={
        'model': cfg.model.copy(update={'n_blocks': cell.n_blocks}),
        'train': cfg.train.copy(update={'seed': cell.seed}),
        'augment': cfg.augment.copy(update={'kind': cell.augmentation}),
        'enhance': cfg.enhance.copy(update={'enabled': cell.enhancement}),
    })


def manifest_hash(manifest: DatasetManifest) -> str:
    return sha256_json(json.loads(manifest.json(exclude={'root'})))


def cell_hash(cell: GridCell, cfg: ExperimentConfig, dataset_hash: str) -> str:
    return sha256_json({
        'cell': json.loads(cell.json()),
        'config': json.loads(cell_config(cfg, cell).json(exclude={'grid'})),
        'dataset': dataset_hash,
        'version': markerseg.__version__,
    })


SegmenterFactory = Callable[[GridCell, ExperimentConfig, DatasetManifest, str], Segmenter]


def train_cell_segmenter(cell: GridCell, cfg: ExperimentConfig, manifest: DatasetManifest, cell_dir: str) -> Segmenter:
    """Default grid factory: trains the cell's recipe and wraps the model."""
    cell_cfg = cell_config(cfg, cell)
    train_manifest = augment(manifest, cell_cfg.augment)
    data, validation = make_datasets(train_manifest, cell_cfg.train, cell_cfg.enhance)
    recipe = RECIPES[cell.method] if cell.method is not None else weighted_ce_recipe(cell.weight)
    outcome = run_recipe(
        build_model(cell_cfg.model, seed=cell.seed), data, recipe, cell_cfg.train,
        os.path.join(cell_dir, 'checkpoints'), validation,
    )
    write_history(outcome.history, cell_dir)
    return ModelSegmenter(outcome.model)


@capture_cell_failure
def run_cell(
    cell: GridCell,
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    cell_dir: str,
    content_hash: str,
    factory: SegmenterFactory,
) -> GridRow:
    with PeakMemoryMonitor() as monitor:
        segmenter = factory(cell, cfg, manifest, cell_dir)
        enhance_cfg = cfg.enhance.copy(update={'enabled': cell.enhancement})
        report = evaluate_dataset(segmenter, manifest, Split.TEST, enhance_cfg)
    write_iou_report(report, cell_dir)
    return GridRow(
        cell=cell.name,
        axes=cell.axes,
        per_class_miou=report.per_class_miou,
        overall_miou=report.overall_miou,
        wall_time_s=monitor.elapsed_s,
        peak_rss_mb=monitor.peak_mb,
        content_hash=content_hash,
    )


def run_grid(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: str,
    force: bool = False,
    factory: SegmenterFactory = train_cell_segmenter,
) -> List[GridRow]:
    """
    Trains and evaluates every grid cell; one row per cell, sorted by cell name.

    A cell whose ``result.json`` carries the same content hash (cell config, dataset
    manifest, package version) is not re-run unless `force`. A failing cell yields a
    row with status 'failed' and the grid continues.
    """
    dataset_hash = manifest_hash(manifest)
    rows = []
    for cell in grid_cells(cfg):
        cell_dir = os.path.join(out_dir, 'grid', cell.name)
        content_hash = cell_hash(cell, cfg, dataset_hash)
        result_path = os.path.join(cell_dir, 'result.json')
        if not force and os.path.exists(result_path):
            previous = GridRow.parse_obj(read_json_file(result_path, cli_logger))
            if previous.status == 'ok' and previous.content_hash == content_hash:
                cli_logger.info('Skipping completed cell {}', cell.name)
                rows.append(previous)
                continue
        cli_logger.info('Running grid cell {}', cell.name)
        row = run_cell(cell, cfg, manifest, cell_dir, content_hash, factory)
        write_json_file(cell_dir, 'result.json', json.loads(row.json()), cli_logger)
        rows.append(row)
    return sorted(rows, key=lambda r: r.cell)


def write_grid_results(rows: List[GridRow], out_dir: str, n_classes: int) -> Tuple[str, str]:
    header = GRID_RESULT_HEADER_PREFIX + [f'miou_class_{c}' for c in range(n_classes)] + [
        'overall_miou', 'wall_time_s', 'peak_rss_mb', 'status',
    ]
    csv_rows = []
    for row in rows:
        per_class = row.per_class_miou or [''] * n_classes
        csv_rows.append(
            [row.cell] + [row.axes.get(k, '') for k in GRID_RESULT_HEADER_PREFIX[1:]] + list(per_class) + [
                '' if row.overall_miou is None else row.overall_miou,
                round(row.wall_time_s, 3),
                '' if row.peak_rss_mb is None else round(row.peak_rss_mb, 1),
                row.status,
            ],
        )
    csv_path = write_csv_file(os.path.join(out_dir, 'grid_results.csv'), header, csv_rows)
    json_path = write_json_file(out_dir, 'grid_results.json', [json.loads(r.json()) for r in rows], cli_logger)
    return csv_path, json_path


# Method comparison
ComparisonFactory = Callable[[MethodVariant, ExperimentConfig, DatasetManifest, str], Dict[str, Segmenter]]


def train_variant_segmenters(
    variant: MethodVariant,
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    run_dir: str,
) -> Dict[str, Segmenter]:
    """Trains one variant; two-stage variants also expose their first-stage model."""
    train_manifest = augment(manifest, cfg.augment)
    data, validation = make_datasets(train_manifest, cfg.train, cfg.enhance)
    recipe = RECIPES[variant]
    outcome = run_recipe(
        build_model(cfg.model, seed=cfg.train.seed), data, recipe, cfg.train,
        os.path.join(run_dir, 'checkpoints'), validation,
    )
    write_history(outcome.history, run_dir)
    segmenters = {variant.value: ModelSegmenter(outcome.model)}
    if len(outcome.stage_models) > 1:
        segmenters[f'{variant.value}:stage1'] = ModelSegmenter(outcome.stage_models[TrainingStage.STAGE1])
    return segmenters


def method_stats(method: str, report: IoUReport) -> MethodStats:
    per_image = np.array(report.per_image, dtype=np.float64)
    return MethodStats(
        method=method,
        mean=[float(v) for v in per_image.mean(axis=0)],
        std=[float(v) for v in per_image.std(axis=0)],
    )


def compare_methods(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: str,
    variants: Optional[List[MethodVariant]] = None,
    factory: ComparisonFactory = train_variant_segmenters,
) -> List[MethodStats]:
    """
    Per-class mean and std of per-image test IoU for each method variant.

    A variant whose training or evaluation fails is reported as absent.
    """
    variants = variants or list(MethodVariant)
    stats = []
    for variant in variants:
        run_dir = os.path.join(out_dir, 'compare', variant.value)
        variant_stats = []
        try:
            segmenters = factory(variant, cfg, manifest, run_dir)
            for name, segmenter in segmenters.items():
                report = evaluate_dataset(segmenter, manifest, Split.TEST, cfg.enhance)
                write_iou_report(report, run_dir, stem=name.replace(':', '_'))
                variant_stats.append(method_stats(name, report))
            stats.extend(variant_stats)
        except Exception as e:
            cli_logger.opt(exception=settings.logs.trace_enabled).error(
                'Variant {} unavailable for comparison: {}', variant.value, e,
            )
            stats.append(MethodStats(method=variant.value, present=False))
    return stats


def write_comparison(stats: List[MethodStats], out_dir: str) -> Tuple[str, str]:
    rows = []
    for s in stats:
        if not s.present:
            rows.append([s.method, 'absent', '', '', ''])
            continue
        for class_id, (mean, std) in enumerate(zip(s.mean, s.std)):
            rows.append([s.method, 'present', class_id, mean, std])
    csv_path = write_csv_file(
        os.path.join(out_dir, 'comparison.csv'), ['method', 'status', 'class_id', 'mean_iou', 'std_iou'], rows,
    )
    png_path = plot_method_comparison(stats, os.path.join(out_dir, 'comparison.png'))
    return csv_path, png_path


# Centers
class CenterExport(BaseModel):
    csv_path: str
    summary_path: str
    detection_rate: float
    mean_latency_s: Optional[float]
    max_latency_s: Optional[float]


def export_centers(
    segmenter: Segmenter,
    manifest: DatasetManifest,
    out_path: str,
    cfg: Optional[ExperimentConfig] = None,
) -> CenterExport:
    """
    Segments every test frame, extracts one center per marker and scores it against
    the ground truth. Missing markers are kept as flagged rows.
    """
    cfg = cfg or ExperimentConfig()
    summary = collect_center_records(segmenter, manifest, cfg.eval, Split.TEST, cfg.enhance)
    csv_path = write_centers_csv(summary.records, out_path)
    latencies = sorted({(r.image_id, r.latency_s) for r in summary.records if r.latency_s is not None})
    values = [v for _, v in latencies]
    summary_path = write_json_file(os.path.dirname(out_path) or '.', 'centers_summary.json', {
        'detection_rate': summary.detection_rate,
        'n_expected': summary.n_expected,
        'n_detected': summary.n_detected,
        'mean_error_mm': summary.mean_error_mm,
        'mean_latency_s': float(np.mean(values)) if values else None,
        'max_latency_s': float(np.max(values)) if values else None,
    }, cli_logger)
    cli_logger.info(
        'Exported {} center records, detection rate {:.2%}', len(summary.records), summary.detection_rate,
    )
    return CenterExport(
        csv_path=csv_path,
        summary_path=summary_path,
        detection_rate=summary.detection_rate,
        mean_latency_s=float(np.mean(values)) if values else None,
        max_latency_s=float(np.max(values)) if values else None,
    )


# Overlays
def render_overlay(
    gt_mask: np.ndarray,
    pred_mask: np.ndarray,
    image: Optional[np.ndarray] = None,
    crop: bool = False,
    pad: int = 10,
) -> np.ndarray:
    """
    RGB overlay of a ground-truth and a predicted mask: ground truth only in red,
    prediction only in green, both in yellow, the rest the grayscale image (black
    when no image is given). With `crop` the result is cut to the masks' bounding
    box padded by `pad` pixels.

    Raises:
        ShapeError: If the masks (and image) differ in shape.
    """
    gt_mask = np.asarray(gt_mask, dtype=bool)
    pred_mask = np.asarray(pred_mask, dtype=bool)
    if gt_mask.shape != pred_mask.shape or (image is not None and np.shape(image) != gt_mask.shape):
        raise ShapeError('overlay inputs differ in shape', {
            'gt': list(gt_mask.shape), 'pred': list(pred_mask.shape),
            'image': list(np.shape(image)) if image is not None else None,
        })
    if image is None:
        gray = np.zeros(gt_mask.shape, dtype=np.uint8)
    else:
        gray = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    rgb[gt_mask & ~pred_mask] = OVERLAY_RED
    rgb[pred_mask & ~gt_mask] = OVERLAY_GREEN
    rgb[gt_mask & pred_mask] = OVERLAY_YELLOW
    if crop and (gt_mask.any() or pred_mask.any()):
        rows, cols = np.nonzero(gt_mask | pred_mask)
        r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, gt_mask.shape[0])
        c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, gt_mask.shape[1])
        rgb = rgb[r0:r1, c0:c1]
    return rgb


def _segmenter_from(checkpoint: Optional[str], oracle: bool) -> Segmenter:
    if oracle:
        return LabelOracle()
    if checkpoint is None:
        raise ContractError('a --checkpoint or --oracle is required')
    model, _ = load_checkpoint(checkpoint)
    return ModelSegmenter(model)


def _dataset_manifest_path(state: CliState, dataset: Optional[str]) -> str:
    return dataset or os.path.join(state.out_dir, 'dataset', 'manifest.json')


# Commands
@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, '--config', help='Experiment configuration (JSON).'),
    seed: Optional[int] = typer.Option(None, '--seed', help='Overrides every seed of the configuration.'),
    out_dir: Path = typer.Option(Path('runs/default'), '--out-dir', help='Run directory.'),
    force: bool = typer.Option(False, '--force', help='Recompute outputs that already exist.'),
):
    add_console_sinks(os.getenv('LOG_LEVEL', 'INFO'), serialize=os.getenv('JSON_LOGS') == '1')
    try:
        cfg = load_experiment_config(str(config) if config else None)
    except MarkerSegException as e:
        cli_logger.error('Unable to load configuration: {}', e)
        raise typer.Exit(code=1)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    ensure_dir(str(out_dir))
    ctx.obj = CliState(cfg, str(out_dir), force)


@app.command()
@cli_command
def gen(ctx: typer.Context):
    """Generate the synthetic dataset into OUT_DIR/dataset."""
    state: CliState = ctx.obj
    dataset_dir = os.path.join(state.out_dir, 'dataset')
    manifest_path = os.path.join(dataset_dir, 'manifest.json')
    if os.path.exists(manifest_path) and not state.force:
        cli_logger.info('Dataset already present at {}, use --force to regenerate', dataset_dir)
        manifest = load_manifest(manifest_path)
    else:
        manifest = generate_dataset(state.cfg.scene, state.cfg.split, dataset_dir)
    fractions = dataset_pixel_fractions(manifest)
    fractions_path = write_json_file(dataset_dir, 'pixel_fractions.json', {
        'mean_class_fractions': fractions,
        'targets': state.cfg.scene.fraction_targets,
        'fraction_scale': state.cfg.scene.fraction_scale,
    }, cli_logger)
    state.recorder.record(manifest_path, 'dataset_manifest')
    state.recorder.record(fractions_path, 'pixel_fractions')


@app.command('augment')
@cli_command
def augment_command(
    ctx: typer.Context,
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
    materialize_frames: Optional[bool] = typer.Option(None, '--materialize/--on-the-fly'),
):
    """Augment the train split with the configured scheme."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    scheme = state.cfg.augment
    augmented = augment(manifest, scheme)
    if materialize_frames is None:
        materialize_frames = scheme.materialize
    if materialize_frames:
        out = os.path.join(state.out_dir, f'augmented_{scheme.kind.value}')
        augmented = materialize(augmented, out)
        path = os.path.join(out, 'manifest.json')
    else:
        path = save_manifest(augmented, manifest.root, f'manifest_{scheme.kind.value}.json')
    cli_logger.info('{} train frames after augmentation', len(augmented.split(Split.TRAIN)))
    state.recorder.record(path, 'augmented_manifest')


@app.command()
@cli_command
def train(
    ctx: typer.Context,
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
    variant: MethodVariant = typer.Option(MethodVariant.EWF, help='Training recipe.'),
    weight: Optional[float] = typer.Option(None, help='Train single-stage weighted CE with this foreground weight.'),
    blocks: Optional[int] = typer.Option(None, help='Overrides model.n_blocks.'),
):
    """Train one recipe and save the model."""
    state: CliState = ctx.obj
    cfg = state.cfg
    if blocks is not None:
        cfg = cfg.copy(update={'model': cfg.model.copy(update={'n_blocks': blocks})})
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    if not any(e.source is not None for e in manifest.frames):
        manifest = augment(manifest, cfg.augment)
    data, validation = make_datasets(manifest, cfg.train, cfg.enhance)
    recipe = weighted_ce_recipe(weight) if weight is not None else RECIPES[variant]
    name = f'wce{weight:g}' if weight is not None else variant.value
    run_dir = os.path.join(state.out_dir, 'train', f'{name}_b{cfg.model.n_blocks}')
    outcome = run_recipe(
        build_model(cfg.model, seed=cfg.train.seed), data, recipe, cfg.train,
        os.path.join(run_dir, 'checkpoints'), validation,
    )
    final_stage = list(outcome.stage_models)[-1]
    model_path = save_checkpoint(os.path.join(run_dir, 'model.pt'), outcome.model, final_stage)
    csv_path, json_path = write_history(outcome.history, run_dir)
    for stage in outcome.stage_models:
        state.recorder.record(os.path.join(run_dir, 'checkpoints', f'{stage.value}.pt'), f'checkpoint_{stage.value}')
    state.recorder.record(model_path, 'model')
    state.recorder.record(csv_path, 'history')
    state.recorder.record(json_path, 'history')


@app.command()
@cli_command
def grid(
    ctx: typer.Context,
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
):
    """Run the ablation grid and write grid_results.csv."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    rows = run_grid(state.cfg, manifest, state.out_dir, state.force)
    for path in write_grid_results(rows, state.out_dir, manifest.header.n_classes):
        state.recorder.record(path, 'grid_results')
    failed = [r.cell for r in rows if r.status != 'ok']
    for cell in failed:
        state.recorder.fail(f'grid cell {cell} failed')
    return bool(failed)


@app.command()
@cli_command
def compare(
    ctx: typer.Context,
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
):
    """Train the five method variants and compare per-class IoU."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    stats = compare_methods(state.cfg, manifest, state.out_dir)
    for path in write_comparison(stats, state.out_dir):
        state.recorder.record(path, 'comparison')
    absent = [s.method for s in stats if not s.present]
    for method in absent:
        state.recorder.fail(f'variant {method} unavailable')
    return bool(absent)


@app.command('eval')
@cli_command
def eval_command(
    ctx: typer.Context,
    checkpoint: Optional[str] = typer.Option(None, help='Model checkpoint.'),
    oracle: bool = typer.Option(False, help='Evaluate the ground truth against itself.'),
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
):
    """Evaluate per-class IoU on the test split."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    report = evaluate_dataset(_segmenter_from(checkpoint, oracle), manifest, Split.TEST, state.cfg.enhance)
    for path in write_iou_report(report, os.path.join(state.out_dir, 'eval')):
        state.recorder.record(path, 'iou_report')


@app.command()
@cli_command
def centers(
    ctx: typer.Context,
    checkpoint: Optional[str] = typer.Option(None, help='Model checkpoint.'),
    oracle: bool = typer.Option(False, help='Use the ground truth as prediction.'),
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
):
    """Export marker centers and their errors as CSV."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    export = export_centers(
        _segmenter_from(checkpoint, oracle), manifest, os.path.join(state.out_dir, 'centers', 'centers.csv'), state.cfg,
    )
    state.recorder.record(export.csv_path, 'centers')
    state.recorder.record(export.summary_path, 'centers_summary')


@app.command()
@cli_command
def overlay(
    ctx: typer.Context,
    frame_id: str = typer.Option(..., help='Frame to render.'),
    checkpoint: Optional[str] = typer.Option(None, help='Model checkpoint.'),
    oracle: bool = typer.Option(False, help='Use the ground truth as prediction.'),
    crop: bool = typer.Option(True, help='Crop each overlay to its masks.'),
    dataset: Optional[str] = typer.Option(None, help='Dataset manifest; defaults to OUT_DIR/dataset/manifest.json.'),
):
    """Render one overlay PNG per marker class for a frame."""
    state: CliState = ctx.obj
    manifest = load_manifest(_dataset_manifest_path(state, dataset))
    entry = manifest.by_id().get(frame_id)
    if entry is None:
        raise ContractError('frame not found in manifest', {'frame_id': frame_id})
    image, labels = load_frame(entry, manifest.root, state.cfg.enhance)
    seg = _segmenter_from(checkpoint, oracle).segment(image, labels)
    for class_id in range(1, manifest.header.n_classes):
        rgb = render_overlay(labels.ids == class_id, seg.ids == class_id, image.pixels, crop=crop)
        path = write_png(os.path.join(state.out_dir, 'overlays', f'{frame_id}_class{class_id}.png'), rgb)
        state.recorder.record(path, 'overlay')


@app.command()
@cli_command
def plot(
    ctx: typer.Context,
    report: str = typer.Option(..., help='Per-image IoU CSV written by eval or grid.'),
):
    """Plot per-image IoU of every class from a report CSV."""
    state: CliState = ctx.obj
    iou = read_iou_report(report)
    plot_dir = os.path.join(state.out_dir, 'plots')
    csv_path, _ = write_iou_report(iou, plot_dir)
    png_path = plot_per_image_iou(iou, os.path.join(plot_dir, 'iou_per_image.png'))
    state.recorder.record(csv_path, 'plot_data')
    state.recorder.record(png_path, 'plot')


if __name__ == '__main__':
    app()
