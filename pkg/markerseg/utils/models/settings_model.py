from typing import List
from typing import Optional

from pydantic import BaseModel
from pydantic import Field
from pydantic import validator

from markerseg.utils.models.data_models import AugmentKind
from markerseg.utils.models.data_models import CenterEstimator
from markerseg.utils.models.data_models import MarkerShape
from markerseg.utils.models.data_models import MarkerSpec
from markerseg.utils.models.data_models import MethodVariant
from markerseg.utils.models.data_models import NormalizationMode
from markerseg.utils.models.data_models import Reduction

CURRENT_SCHEMA_VERSION = 1


class Logs(BaseModel):
    trace_enabled: bool = False
    write_to_files: bool = False


class Validation(BaseModel):
    # one-hot / simplex checks on every cube construction
    check_invariants: bool = True


class Labels(BaseModel):
    n_marker_classes: int = Field(5, ge=1)


class IOSettings(BaseModel):
    retry_attempts: int = 3
    normalization: NormalizationMode = NormalizationMode.MAX


class Settings(BaseModel):
    logs: Logs = Logs()
    validation: Validation = Validation()
    labels: Labels = Labels()
    io: IOSettings = IOSettings()


def default_marker_specs() -> List[MarkerSpec]:
    return [
        MarkerSpec(class_id=1, shape=MarkerShape.CIRCLE, hole_radius=0.5, length=2.6),
        MarkerSpec(class_id=2, shape=MarkerShape.SPHERE, hole_radius=0.2, length=None),
        MarkerSpec(class_id=3, shape=MarkerShape.TUBE, hole_radius=0.2, length=2.5),
        MarkerSpec(class_id=4, shape=MarkerShape.CROSS, hole_radius=None, length=3.0),
        MarkerSpec(class_id=5, shape=MarkerShape.TRIANGLE, hole_radius=0.63, length=2.5),
    ]


def default_view_angles() -> List[float]:
    return [float(a) for a in range(-90, 91, 15)]


# Scene related models
class NoiseConfig(BaseModel):
    gaussian_sigma: float = Field(20.0, ge=0)
    # detector gain; 0 disables the shot-noise term
    poisson_scale: float = Field(1.0, ge=0)


class BackgroundConfig(BaseModel):
    level: float = Field(2400.0, gt=0)
    gradient_amplitude: float = Field(600.0, ge=0)
    mesh_amplitude: float = Field(150.0, ge=0)
    mesh_period_px: float = Field(9.0, gt=0)


class SceneConfig(BaseModel):
    width: int = Field(512, ge=16)
    height: int = Field(512, ge=16)
    n_setups: int = Field(14, ge=1)
    view_angles: List[float] = Field(default_factory=default_view_angles)
    pixel_pitch: float = Field(0.8, gt=0)
    stent_segments: int = Field(1, ge=1)
    marker_specs: List[MarkerSpec] = Field(default_factory=default_marker_specs)
    fraction_targets: List[float] = [0.0003, 0.0001, 0.0002, 0.0003, 0.0003]
    fraction_scale: float = Field(1.0, gt=0)
    min_marker_pixels: int = Field(6, ge=1)
    min_foreshortening: float = Field(0.5, gt=0, le=1)
    min_marker_distance_px: float = Field(20.0, ge=0)
    allow_overlap: bool = False
    stent_radius_px: Optional[float] = None
    marker_contrast: float = Field(0.6, gt=0, le=1)
    noise: NoiseConfig = NoiseConfig()
    background: BackgroundConfig = BackgroundConfig()
    dropped_setups: int = Field(1, ge=0)
    missing_frames: int = Field(11, ge=0)
    seed: int = 0
    workers: int = Field(0, ge=0)

    @validator('view_angles')
    def angles_in_range(cls, v):
        if not v:
            raise ValueError('at least one view angle is required')
        for angle in v:
            if angle < -90 or angle > 90:
                raise ValueError(f'view angle {angle} outside [-90, 90]')
        return v

    @validator('fraction_targets')
    def targets_match_specs(cls, v, values):
        specs = values.get('marker_specs')
        if specs is not None and len(v) != len(specs):
            raise ValueError('fraction_targets must list one target per marker spec')
        return v


class SplitRule(BaseModel):
    test_setups: Optional[List[int]] = None
    train_setups: Optional[List[int]] = None
    n_test_setups: int = Field(6, ge=1)


# Pipeline related models
class AugmentScheme(BaseModel):
    kind: AugmentKind = AugmentKind.SCHEME_A
    materialize: bool = False


class EnhanceConfig(BaseModel):
    enabled: bool = False
    low_percentile: float = 1.0
    high_percentile: float = 99.0
    tiles: int = Field(8, ge=1)
    clip_limit: float = Field(0.01, gt=0)


# Model related models
class InitConfig(BaseModel):
    mean: float = 0.0
    std: float = Field(0.1, gt=0)
    bias: float = 0.1
    # truncation at +-2 std
    truncation: float = 2.0


class ModelConfig(BaseModel):
    n_blocks: int = Field(3, ge=1, le=6)
    base_channels: int = Field(64, ge=1)
    in_channels: int = Field(1, ge=1)
    n_classes: int = Field(6, ge=2)
    dropout_rate: float = Field(0.75, gt=0, le=1)
    # 'keep': dropout_rate is the keep probability; 'drop': it is the drop fraction
    dropout_semantics: str = 'keep'
    width: int = 512
    height: int = 512
    init: InitConfig = InitConfig()
    device: str = 'cpu'

    @validator('dropout_semantics')
    def known_semantics(cls, v):
        if v not in ('keep', 'drop'):
            raise ValueError('dropout_semantics must be keep or drop')
        return v

    @property
    def drop_probability(self) -> float:
        if self.dropout_semantics == 'keep':
            return 1.0 - self.dropout_rate
        return self.dropout_rate


# Training related models
class PlateauConfig(BaseModel):
    window: int = Field(10, ge=2)
    min_rel_improvement: float = Field(0.005, ge=0)


class TrainConfig(BaseModel):
    momentum: float = Field(0.95, ge=0, lt=1)
    batch_size: int = Field(1, ge=1)
    lr0: float = Field(0.01, ge=0)
    lr_divisor: float = 2.0
    plateau: PlateauConfig = PlateauConfig()
    max_divisions: int = Field(4, ge=0)
    max_epochs: int = Field(50, ge=1)
    reduction: Reduction = Reduction.MEAN
    detach_focal_factor: bool = False
    enable_stage2: bool = True
    validation_fraction: float = Field(0.0, ge=0, lt=1)
    num_workers: int = Field(0, ge=0)
    seed: int = 0

    @validator('lr_divisor')
    def known_divisors(cls, v):
        if v not in (2.0, 5.0):
            raise ValueError('lr_divisor must be 2 or 5')
        return v


# Evaluation related models
class EvalConfig(BaseModel):
    pitch_mm_per_px: float = 0.8
    threshold_mm: float = 1.6
    connectivity: int = 4
    estimator: CenterEstimator = CenterEstimator.LARGEST

    @validator('connectivity')
    def known_connectivity(cls, v):
        if v not in (4, 8):
            raise ValueError('connectivity must be 4 or 8')
        return v


# Experiment related models
class GridAxes(BaseModel):
    n_blocks: List[int] = [1, 2, 3]
    augmentation: List[AugmentKind] = [AugmentKind.SCHEME_A]
    enhancement: List[bool] = [False]
    method: List[MethodVariant] = [MethodVariant.EWF]
    # each foreground weight adds cells trained with single-stage weighted
    # cross-entropy next to the method cells
    weight: List[float] = []
    seeds: List[int] = [0]

    @validator('n_blocks', each_item=True)
    def blocks_in_range(cls, v):
        if v < 1 or v > 6:
            raise ValueError('n_blocks must be within [1, 6]')
        return v

    @validator('weight', each_item=True)
    def positive_weight(cls, v):
        if v <= 0:
            raise ValueError('foreground weights must be positive')
        return v


class ExperimentConfig(BaseModel):
    schema_version: int = CURRENT_SCHEMA_VERSION
    scene: SceneConfig = SceneConfig()
    split: SplitRule = SplitRule()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentScheme = AugmentScheme()
    enhance: EnhanceConfig = EnhanceConfig()
    eval: EvalConfig = EvalConfig()
    grid: GridAxes = GridAxes()
