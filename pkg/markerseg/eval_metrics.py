"""
Intersection-over-union evaluation and marker center extraction.
"""
import math
import os
import time
from typing import Dict
from typing import List
from typing import Optional
from typing import Protocol
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from scipy import ndimage

from markerseg.core_types import LabelMap
from markerseg.core_types import NormalizedImage
from markerseg.core_types import SegMap
from markerseg.core_types import mask_centroid
from markerseg.core_types import n_classes_default
from markerseg.pipeline import load_frame
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.file_utils import read_csv_file
from markerseg.utils.file_utils import write_csv_file
from markerseg.utils.file_utils import write_json_file
from markerseg.utils.models.data_models import CenterEstimator
from markerseg.utils.models.data_models import CenterPoint
from markerseg.utils.models.data_models import CenterRecord
from markerseg.utils.models.data_models import IoUReport
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.settings_model import EnhanceConfig
from markerseg.utils.models.settings_model import EvalConfig

eval_logger = logger.bind(module='EvalMetrics')

CENTERS_CSV_HEADER = [
    'image_id', 'class_id', 'pred_x_px', 'pred_y_px', 'gt_x_px', 'gt_y_px',
    'error_px', 'error_mm', 'detected', 'latency_s',
]

ArrayLike = Union[SegMap, LabelMap, np.ndarray]


def _ids(m: ArrayLike) -> np.ndarray:
    return m.ids if isinstance(m, (SegMap, LabelMap)) else np.asarray(m)


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """
    |pred & gt| / |pred | gt| for boolean masks.

    Two empty masks agree perfectly (1.0); exactly one empty mask scores 0.0.

    Raises:
        ShapeError: If the masks differ in shape.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError('masks differ in shape', {'pred': list(pred_mask.shape), 'gt': list(gt_mask.shape)})
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred_mask & gt_mask) / union


def per_class_iou(seg: ArrayLike, labels: ArrayLike, n_classes: Optional[int] = None) -> List[float]:
    n_classes = n_classes or n_classes_default()
    pred, truth = _ids(seg), _ids(labels)
    return [iou(pred == c, truth == c) for c in range(n_classes)]


def overall_miou(per_class: Sequence[float]) -> float:
    """Arithmetic mean of the per-class mIoU values."""
    if not per_class:
        raise ContractError('no per-class values to average')
    return float(np.mean(per_class))


def iou_report(image_ids: List[str], per_image: List[List[float]]) -> IoUReport:
    if not image_ids:
        raise ContractError('cannot build an IoU report without images')
    per_class = [float(v) for v in np.mean(np.array(per_image, dtype=np.float64), axis=0)]
    return IoUReport(
        image_ids=list(image_ids),
        per_image=[[float(v) for v in row] for row in per_image],
        per_class_miou=per_class,
        overall_miou=overall_miou(per_class),
    )


class Segmenter(Protocol):
    """Anything that turns a frame into a segmentation map."""

    def segment(self, image: NormalizedImage, truth: LabelMap) -> SegMap:
        ...


class ModelSegmenter:
    """Segments with a trained U-Net; the ground truth is ignored."""

    def __init__(self, model):
        self.model = model

    def segment(self, image: NormalizedImage, truth: LabelMap) -> SegMap:
        _, seg = self.model.predict(image)
        return seg


class LabelOracle:
    """Returns the ground truth as its prediction."""

    def segment(self, image: NormalizedImage, truth: LabelMap) -> SegMap:
        return SegMap(ids=truth.ids)


def _test_entries(manifest: DatasetManifest, split: Split):
    entries = sorted(manifest.split(split), key=lambda e: e.frame_id)
    if not entries:
        raise ContractError('evaluation split is empty', {'split': split.value})
    missing = [
        e.frame_id for e in entries
        if not os.path.exists(os.path.join(manifest.root, e.image_path))
        or not os.path.exists(os.path.join(manifest.root, e.label_path))
    ]
    if missing:
        raise ContractError(
            'frames listed in the manifest are missing', {'frames': missing[:10], 'count': len(missing)},
        )
    return entries


def evaluate_dataset(
    segmenter: Segmenter,
    manifest: DatasetManifest,
    split: Split = Split.TEST,
    enhance_cfg: Optional[EnhanceConfig] = None,
) -> IoUReport:
    """
    Per-image, per-class IoU over a split, aggregated in sorted frame-id order.

    Raises:
        ContractError: If the split is empty or any of its frames is missing.
    """
    entries = _test_entries(manifest, split)
    n_classes = manifest.header.n_classes
    per_image = []
    for entry in entries:
        image, labels = load_frame(entry, manifest.root, enhance_cfg)
        per_image.append(per_class_iou(segmenter.segment(image, labels), labels, n_classes))
    report = iou_report([e.frame_id for e in entries], per_image)
    eval_logger.info('Evaluated {} frames, overall mIoU {:.4f}', len(entries), report.overall_miou)
    return report


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ConfigError('connectivity must be 4 or 8', {'connectivity': connectivity})
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def _components(mask: np.ndarray, connectivity: int) -> List[np.ndarray]:
    labeled, count = ndimage.label(mask, structure=_structure(connectivity))
    return [labeled == index for index in range(1, count + 1)]


def largest_component_centroid(mask: np.ndarray, connectivity: int = 4) -> Optional[Tuple[float, float]]:
    """
    Centroid of the largest connected component of `mask`.

    Equal-size components are resolved towards the centroid that comes first in
    row-major order (smallest y, then smallest x).
    """
    components = _components(mask, connectivity)
    if not components:
        return None
    sizes = [int(c.sum()) for c in components]
    largest = max(sizes)
    centroids = [mask_centroid(c) for c, size in zip(components, sizes) if size == largest]
    return min(centroids, key=lambda xy: (xy[1], xy[0]))


def extract_centers(
    seg: ArrayLike,
    connectivity: int = 4,
    estimator: CenterEstimator = CenterEstimator.LARGEST,
    n_classes: Optional[int] = None,
) -> Dict[int, Optional[Tuple[float, float]]]:
    """
    One ``(x, y)`` center per marker class, or None where the class is absent.

    `estimator` 'largest' takes the largest connected component; 'all_pixels' takes
    the centroid of every pixel of the class.
    """
    n_classes = n_classes or n_classes_default()
    ids = _ids(seg)
    centers = {}
    for class_id in range(1, n_classes):
        mask = ids == class_id
        if estimator == CenterEstimator.ALL_PIXELS:
            centers[class_id] = mask_centroid(mask)
        else:
            centers[class_id] = largest_component_centroid(mask, connectivity)
    return centers


def extract_all_centers(seg: ArrayLike, connectivity: int = 4, n_classes: Optional[int] = None) -> List[CenterPoint]:
    """Centroid of every connected component of every marker class, for frames holding several stent segments."""
    n_classes = n_classes or n_classes_default()
    ids = _ids(seg)
    points = []
    for class_id in range(1, n_classes):
        for component in _components(ids == class_id, connectivity):
            x, y = mask_centroid(component)
            points.append(CenterPoint(class_id=class_id, x=x, y=y))
    points.sort(key=lambda p: (p.class_id, p.y, p.x))
    return points


def match_centers(
    predicted: List[CenterPoint],
    truth: List[CenterPoint],
) -> List[Tuple[CenterPoint, Optional[CenterPoint]]]:
    """
    Pairs ground-truth centers with predictions of the same class, nearest pairs first.

    Returns one ``(truth, prediction or None)`` tuple per ground-truth center, in the
    order of `truth`.
    """
    candidates = []
    for t_index, t in enumerate(truth):
        for p_index, p in enumerate(predicted):
            if p.class_id == t.class_id:
                candidates.append((math.hypot(p.x - t.x, p.y - t.y), t_index, p_index))
    candidates.sort()
    assigned: Dict[int, int] = {}
    used = set()
    for _, t_index, p_index in candidates:
        if t_index in assigned or p_index in used:
            continue
        assigned[t_index] = p_index
        used.add(p_index)
    return [(t, predicted[assigned[i]] if i in assigned else None) for i, t in enumerate(truth)]


class CenterErrorSummary(BaseModel):
    records: List[CenterRecord]
    detection_rate: float
    n_expected: int
    n_detected: int
    mean_error_mm: Optional[float] = None


def center_errors(
    records: List[CenterRecord],
    pitch_mm_per_px: float = 0.8,
    threshold_mm: float = 1.6,
) -> CenterErrorSummary:
    """
    Fills the pixel/millimetre errors of each record and the detection rate.

    A marker is detected when its error is strictly below `threshold_mm`. Missing
    predictions count as failures and are flagged, as are detections at or above
    the threshold.

    Raises:
        ConfigError: If the pitch is not positive.
    """
    if pitch_mm_per_px <= 0:
        raise ConfigError('pixel pitch must be positive', {'pitch_mm_per_px': pitch_mm_per_px})
    out = []
    for record in records:
        if record.predicted is None:
            out.append(record.copy(update={'error_px': None, 'error_mm': None, 'detected': False, 'flagged': True}))
            continue
        error_px = math.hypot(
            record.predicted[0] - record.ground_truth[0], record.predicted[1] - record.ground_truth[1],
        )
        error_mm = error_px * pitch_mm_per_px
        detected = error_mm < threshold_mm
        out.append(record.copy(update={
            'error_px': error_px, 'error_mm': error_mm, 'detected': detected, 'flagged': not detected,
        }))
    n_detected = sum(r.detected for r in out)
    errors = [r.error_mm for r in out if r.error_mm is not None]
    return CenterErrorSummary(
        records=out,
        detection_rate=n_detected / len(out) if out else 0.0,
        n_expected=len(out),
        n_detected=n_detected,
        mean_error_mm=float(np.mean(errors)) if errors else None,
    )


def frame_center_records(
    image_id: str,
    seg: ArrayLike,
    gt_centers: List[CenterPoint],
    eval_cfg: Optional[EvalConfig] = None,
    latency_s: Optional[float] = None,
) -> List[CenterRecord]:
    """
    Builds unscored center records for one frame.

    A frame with one marker per class uses ``extract_centers``; frames with several
    stent segments match every extracted component against the ground truth.
    """
    eval_cfg = eval_cfg or EvalConfig()
    multi_segment = len({c.segment_id for c in gt_centers}) > 1
    if multi_segment:
        pairs = match_centers(extract_all_centers(seg, eval_cfg.connectivity), gt_centers)
        predictions = [(t, (p.x, p.y) if p is not None else None) for t, p in pairs]
    else:
        found = extract_centers(seg, eval_cfg.connectivity, eval_cfg.estimator)
        predictions = [(t, found.get(t.class_id)) for t in gt_centers]
    return [
        CenterRecord(
            image_id=image_id,
            class_id=truth.class_id,
            predicted=list(predicted) if predicted is not None else None,
            ground_truth=[truth.x, truth.y],
            latency_s=latency_s,
        )
        for truth, predicted in predictions
    ]


def collect_center_records(
    segmenter: Segmenter,
    manifest: DatasetManifest,
    eval_cfg: Optional[EvalConfig] = None,
    split: Split = Split.TEST,
    enhance_cfg: Optional[EnhanceConfig] = None,
) -> CenterErrorSummary:
    """Segments every frame of a split, extracts centers and scores them, timing each frame."""
    eval_cfg = eval_cfg or EvalConfig()
    records = []
    for entry in _test_entries(manifest, split):
        image, labels = load_frame(entry, manifest.root, enhance_cfg)
        started = time.perf_counter()
        seg = segmenter.segment(image, labels)
        latency = time.perf_counter() - started
        records += frame_center_records(entry.frame_id, seg, entry.gt_centers, eval_cfg, latency)
    return center_errors(records, eval_cfg.pitch_mm_per_px, eval_cfg.threshold_mm)


def write_iou_report(report: IoUReport, out_dir: str, stem: str = 'iou') -> Tuple[str, str]:
    """Writes the per-image matrix as CSV and the aggregates as JSON."""
    n_classes = len(report.per_class_miou)
    csv_path = write_csv_file(
        os.path.join(out_dir, f'{stem}_per_image.csv'),
        ['image_id'] + [f'class_{c}' for c in range(n_classes)],
        ([image_id] + row for image_id, row in zip(report.image_ids, report.per_image)),
    )
    json_path = write_json_file(out_dir, f'{stem}_summary.json', {
        'per_class_miou': report.per_class_miou,
        'overall_miou': report.overall_miou,
        'n_images': len(report.image_ids),
    }, eval_logger)
    return csv_path, json_path


def read_iou_report(csv_path: str) -> IoUReport:
    rows = read_csv_file(csv_path)
    if not rows:
        raise ContractError('IoU report CSV has no rows', {'path': csv_path})
    class_columns = [k for k in rows[0].keys() if k.startswith('class_')]
    return iou_report(
        [row['image_id'] for row in rows],
        [[float(row[k]) for k in class_columns] for row in rows],
    )


def write_centers_csv(records: List[CenterRecord], path: str) -> str:
    def _fmt(value):
        return '' if value is None else value

    rows = []
    for r in records:
        pred_x, pred_y = (r.predicted if r.predicted is not None else (None, None))
        rows.append([
            r.image_id, r.class_id, _fmt(pred_x), _fmt(pred_y), r.ground_truth[0], r.ground_truth[1],
            _fmt(r.error_px), _fmt(r.error_mm), int(r.detected), _fmt(r.latency_s),
        ])
    return write_csv_file(path, CENTERS_CSV_HEADER, rows)
