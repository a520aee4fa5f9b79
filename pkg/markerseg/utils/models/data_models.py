from enum import Enum
from typing import Dict
from typing import List
from typing import Optional

from pydantic import BaseModel
from pydantic import Field


class NormalizationMode(Enum):
    MAX = 'max'
    MINMAX = 'minmax'


class MarkerShape(Enum):
    CIRCLE = 'circle'
    SPHERE = 'sphere'
    TUBE = 'tube'
    CROSS = 'cross'
    TRIANGLE = 'triangle'


class AugmentKind(Enum):
    SCHEME_A = 'scheme_a'
    SCHEME_B = 'scheme_b'
    NONE = 'none'


class FlipMode(Enum):
    IDENTITY = 'none'
    HORIZONTAL = 'h'
    VERTICAL = 'v'


class LossKind(Enum):
    CROSS_ENTROPY = 'cross_entropy'
    FOCAL = 'focal'


class Reduction(Enum):
    SUM = 'sum'
    MEAN = 'mean'


class MethodVariant(Enum):
    EWF = 'EWF'
    W50 = 'W50'
    FOCAL_SCRATCH = 'FOCAL_SCRATCH'
    EW_ONLY = 'EW_ONLY'
    WF50 = 'WF50'


class TrainingStage(Enum):
    STAGE1 = 'stage1'
    STAGE2 = 'stage2'


class CenterEstimator(Enum):
    LARGEST = 'largest'
    ALL_PIXELS = 'all_pixels'


class Split(Enum):
    TRAIN = 'train'
    TEST = 'test'


# Synthetic generator related models
class MarkerSpec(BaseModel):
    class_id: int = Field(..., ge=1)
    shape: MarkerShape
    # millimetres, None where the marker has no such dimension
    hole_radius: Optional[float]
    thickness: float = 0.8
    length: Optional[float]


class MarkerPose(BaseModel):
    x: float
    y: float
    rotation_deg: float = 0.0
    foreshortening: float = 1.0


class CenterPoint(BaseModel):
    class_id: int
    x: float
    y: float
    segment_id: int = 0


# Training related models
class ClassWeights(BaseModel):
    w: List[float]

    @classmethod
    def equal(cls, n_classes: int) -> 'ClassWeights':
        return cls(w=[1.0] * n_classes)

    @classmethod
    def foreground(cls, n_classes: int, weight: float) -> 'ClassWeights':
        return cls(w=[1.0] + [float(weight)] * (n_classes - 1))


class LossSpec(BaseModel):
    kind: LossKind
    weights: ClassWeights
    focal_gamma: float = 2.0
    reduction: Reduction = Reduction.MEAN
    detach_focal_factor: bool = False


class EpochRecord(BaseModel):
    epoch: int
    stage: int
    lr: float
    loss: float
    val_iou: Optional[List[float]] = None


class TrainHistory(BaseModel):
    records: List[EpochRecord] = []

    def losses(self, stage: Optional[int] = None) -> List[float]:
        return [r.loss for r in self.records if stage is None or r.stage == stage]

    def extend(self, other: 'TrainHistory') -> 'TrainHistory':
        return TrainHistory(records=self.records + other.records)


# Evaluation related models
class CenterRecord(BaseModel):
    image_id: str
    class_id: int
    predicted: Optional[List[float]]
    ground_truth: List[float]
    error_px: Optional[float] = None
    error_mm: Optional[float] = None
    detected: bool = False
    flagged: bool = False
    latency_s: Optional[float] = None


class IoUReport(BaseModel):
    image_ids: List[str]
    per_image: List[List[float]]
    per_class_miou: List[float]
    overall_miou: float


class MethodStats(BaseModel):
    method: str
    present: bool = True
    mean: List[float] = []
    std: List[float] = []


class GridRow(BaseModel):
    cell: str
    axes: Dict[str, str]
    per_class_miou: List[float] = []
    overall_miou: Optional[float] = None
    wall_time_s: float = 0.0
    peak_rss_mb: Optional[float] = None
    content_hash: str = ''
    status: str = 'ok'
    error: Optional[str] = None
