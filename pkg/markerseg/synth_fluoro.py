"""
Seeded generator of synthetic fluoroscopy-like frames.

Markers are rendered from their physical dimensions, sitting on a stent modelled as a
cylinder whose axis runs along the image y axis. A view angle rotates the cylinder
about that axis; a marker's projected x position and its foreshortening follow from its
angular position on the cylinder. Ground truth is exact: labels are the rendered
pixels and centers are the centroids of those pixels.
"""
import math
import os
from concurrent.futures import ProcessPoolExecutor
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from scipy import ndimage

from markerseg.core_types import GrayImage
from markerseg.core_types import LabelMap
from markerseg.core_types import mask_centroid
from markerseg.core_types import read_label_png
from markerseg.core_types import write_gray_png
from markerseg.core_types import write_label_png
from markerseg.pipeline import save_manifest
from markerseg.settings.config import settings
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import PlacementError
from markerseg.utils.exceptions import SplitError
from markerseg.utils.file_utils import sha256_json
from markerseg.utils.models.data_models import CenterPoint
from markerseg.utils.models.data_models import MarkerPose
from markerseg.utils.models.data_models import MarkerShape
from markerseg.utils.models.data_models import MarkerSpec
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.manifest_models import FrameEntry
from markerseg.utils.models.manifest_models import ManifestHeader
from markerseg.utils.models.settings_model import SceneConfig
from markerseg.utils.models.settings_model import SplitRule

synth_logger = logger.bind(module='SynthFluoro')

# E|sin(phi)| for phi uniform on the circle
MEAN_ABS_SIN = 2.0 / math.pi

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class MarkerStamp(BaseModel):
    mask: np.ndarray
    row0: int
    col0: int
    centroid: Tuple[float, float]

    class Config:
        arbitrary_types_allowed = True

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


class FrameRecord(BaseModel):
    frame_id: str
    image: GrayImage
    labels: LabelMap
    gt_centers: List[CenterPoint]
    setup_id: int
    view_angle: float


class PlannedFrame(BaseModel):
    setup_id: int
    view_angle: float
    split: Split


class _PlacedMarker(BaseModel):
    spec: MarkerSpec
    segment_id: int
    axis_x: float
    radius: float
    z: float
    phi: float
    rotation_deg: float


def _require(spec: MarkerSpec, *names: str) -> None:
    for name in names:
        if getattr(spec, name) is None:
            raise ConfigError(f'{spec.shape.value} marker needs a {name}', {'class_id': spec.class_id})


def marker_extent_mm(spec: MarkerSpec) -> float:
    """Radius of the smallest origin-centred disc containing the face-on marker."""
    if spec.shape == MarkerShape.CIRCLE:
        _require(spec, 'length')
        return spec.length / 2
    if spec.shape == MarkerShape.SPHERE:
        return spec.thickness / 2
    if spec.shape in (MarkerShape.TUBE, MarkerShape.CROSS):
        _require(spec, 'length')
        return math.hypot(spec.length / 2, spec.thickness / 2)
    _require(spec, 'length')
    return spec.length / math.sqrt(3)


def triangle_hole_radius(spec: MarkerSpec) -> float:
    """
    Radius of the through-hole of a triangle marker as seen on the detector.

    A hole leaving less than half the marker thickness of wall to the triangle's edges
    is taken to run parallel to the detector, like the sphere and tube bores, and
    does not show.
    """
    inradius = spec.length / (2 * math.sqrt(3))
    if not spec.hole_radius or inradius - spec.hole_radius < spec.thickness / 2:
        return 0.0
    return spec.hole_radius


def footprint_area_mm2(spec: MarkerSpec) -> float:
    """
    Face-on projected area of a marker.

    circle: ring of outer diameter `length` around a hole; sphere: disc of diameter
    `thickness` (its bore runs parallel to the detector and does not show); tube: a
    `length` x `thickness` bar; cross: two such bars; triangle: equilateral triangle of
    side `length`, minus its visible hole (see ``triangle_hole_radius``).
    """
    if spec.shape == MarkerShape.CIRCLE:
        _require(spec, 'length', 'hole_radius')
        return math.pi * ((spec.length / 2) ** 2 - spec.hole_radius ** 2)
    if spec.shape == MarkerShape.SPHERE:
        return math.pi * (spec.thickness / 2) ** 2
    if spec.shape == MarkerShape.TUBE:
        _require(spec, 'length')
        return spec.length * spec.thickness
    if spec.shape == MarkerShape.CROSS:
        _require(spec, 'length')
        return 2 * spec.length * spec.thickness - spec.thickness ** 2
    _require(spec, 'length')
    return math.sqrt(3) / 4 * spec.length ** 2 - math.pi * triangle_hole_radius(spec) ** 2


def _inside(spec: MarkerSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u ** 2 + v ** 2
    if spec.shape == MarkerShape.CIRCLE:
        return (r2 >= spec.hole_radius ** 2) & (r2 <= (spec.length / 2) ** 2)
    if spec.shape == MarkerShape.SPHERE:
        return r2 <= (spec.thickness / 2) ** 2
    half_len = spec.length / 2
    half_thick = spec.thickness / 2
    if spec.shape == MarkerShape.TUBE:
        return (np.abs(u) <= half_len) & (np.abs(v) <= half_thick)
    if spec.shape == MarkerShape.CROSS:
        bar_u = (np.abs(u) <= half_len) & (np.abs(v) <= half_thick)
        bar_v = (np.abs(v) <= half_len) & (np.abs(u) <= half_thick)
        return bar_u | bar_v
    # equilateral triangle, apex towards -v, edge normals at 90, 210 and 330 degrees
    inradius = spec.length / (2 * math.sqrt(3))
    inside = np.ones_like(u, dtype=bool)
    for normal_deg in (90.0, 210.0, 330.0):
        a = math.radians(normal_deg)
        inside &= (u * round(math.cos(a), 12) + v * round(math.sin(a), 12)) <= inradius
    hole = triangle_hole_radius(spec)
    if hole:
        inside &= r2 >= hole ** 2
    return inside


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labeled, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labeled, index=np.arange(1, count + 1))
    return labeled == (int(np.argmax(sizes)) + 1)


def render_marker(
    spec: MarkerSpec,
    pose: MarkerPose,
    pitch: float,
    frame_shape: Optional[Tuple[int, int]] = None,
) -> MarkerStamp:
    """
    Rasterizes one marker at a pose.

    A pixel belongs to the stamp when its centre falls inside the marker outline.
    The outline is rotated in-plane by ``pose.rotation_deg`` and then compressed along
    the image x axis by ``pose.foreshortening`` to emulate an oblique view. The stamp
    is reduced to its largest 4-connected component so every marker is one blob.

    Args:
        spec: Marker geometry in millimetres.
        pose: Centre, in-plane rotation and foreshortening factor.
        pitch: Millimetres per pixel.
        frame_shape: ``(width, height)`` to clip against, or None for no clipping.

    Returns:
        MarkerStamp: Local boolean mask, its top-left offset and the stamp centroid.

    Raises:
        PlacementError: If the foreshortening factor is outside (0, 1] or the stamp
            falls entirely outside the frame.
    """
    if not 0 < pose.foreshortening <= 1:
        raise PlacementError('foreshortening factor must lie in (0, 1]', {'foreshortening': pose.foreshortening})
    if pitch <= 0:
        raise ConfigError('pixel pitch must be positive', {'pitch': pitch})

    half = int(math.ceil(marker_extent_mm(spec) / pitch)) + 1
    row0 = int(math.floor(pose.y)) - half
    col0 = int(math.floor(pose.x)) - half
    rows = np.arange(row0, row0 + 2 * half + 2)
    cols = np.arange(col0, col0 + 2 * half + 2)
    dy = rows[:, None] - pose.y
    dx = (cols[None, :] - pose.x) / pose.foreshortening

    theta = math.radians(pose.rotation_deg)
    cos_t = round(math.cos(theta), 12)
    sin_t = round(math.sin(theta), 12)
    u = (cos_t * dx + sin_t * dy) * pitch
    v = (-sin_t * dx + cos_t * dy) * pitch
    mask = _inside(spec, u, v)
    if not mask.any():
        # sub-pixel marker: keep the pixel nearest to the pose
        mask[int(round(pose.y)) - row0, int(round(pose.x)) - col0] = True
    mask = _largest_component(mask)

    if frame_shape is not None:
        width, height = frame_shape
        r_lo, c_lo = max(row0, 0), max(col0, 0)
        r_hi, c_hi = min(row0 + mask.shape[0], height), min(col0 + mask.shape[1], width)
        if r_lo >= r_hi or c_lo >= c_hi or not mask[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0].any():
            raise PlacementError(
                'marker stamp lies outside the frame',
                {'class_id': spec.class_id, 'x': pose.x, 'y': pose.y, 'frame': list(frame_shape)},
            )
        mask = mask[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0]
        row0, col0 = r_lo, c_lo

    x_local, y_local = mask_centroid(mask)
    return MarkerStamp(mask=mask, row0=row0, col0=col0, centroid=(x_local + col0, y_local + row0))


def mean_foreshortening(cfg: SceneConfig) -> float:
    return cfg.min_foreshortening + (1 - cfg.min_foreshortening) * MEAN_ABS_SIN


def calibrate_pitches(cfg: SceneConfig) -> List[float]:
    """
    Effective millimetres-per-pixel for each marker class.

    Each class gets a projection magnification such that its face-on footprint,
    averaged over foreshortening, covers ``fraction_target * fraction_scale`` of the
    frame split over the stent segments.

    Raises:
        ConfigError: If the targets are infeasible: fewer than ``min_marker_pixels``
            pixels per marker, or a magnification below 1 (marker physically larger
            than its target at the detector pitch).
    """
    if len(cfg.marker_specs) != settings.labels.n_marker_classes:
        raise ConfigError(
            'marker spec count does not match the configured number of marker classes',
            {'specs': len(cfg.marker_specs), 'n_marker_classes': settings.labels.n_marker_classes},
        )
    frame_area = cfg.width * cfg.height
    pitches = []
    for spec, fraction in zip(cfg.marker_specs, cfg.fraction_targets):
        target = fraction * cfg.fraction_scale * frame_area / cfg.stent_segments
        if target < cfg.min_marker_pixels:
            raise ConfigError(
                'fraction target gives fewer pixels per marker than min_marker_pixels',
                {'class_id': spec.class_id, 'target_px': target, 'min_marker_pixels': cfg.min_marker_pixels},
            )
        face_on = target / mean_foreshortening(cfg)
        magnification = math.sqrt(face_on / footprint_area_mm2(spec)) * cfg.pixel_pitch
        if magnification < 1:
            raise ConfigError(
                'fraction target is smaller than the physical marker footprint at this pitch',
                {'class_id': spec.class_id, 'magnification': magnification, 'pitch': cfg.pixel_pitch},
            )
        pitches.append(cfg.pixel_pitch / magnification)
    return pitches


def expected_class_pixels(cfg: SceneConfig) -> List[float]:
    return [f * cfg.fraction_scale * cfg.width * cfg.height for f in cfg.fraction_targets]


def _setup_layout(cfg: SceneConfig, setup_id: int, pitches: Sequence[float]) -> List[_PlacedMarker]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, setup_id]))
    specs = cfg.marker_specs
    n_markers = len(specs)
    segment_width = cfg.width / cfg.stent_segments
    margin = max(math.ceil(marker_extent_mm(s) / p) for s, p in zip(specs, pitches)) + 2
    radius = cfg.stent_radius_px if cfg.stent_radius_px is not None else 0.3 * segment_width
    radius = min(radius, segment_width / 2 - margin)
    if radius < 0:
        raise PlacementError('stent segments are too narrow for the marker footprint', {'segment_width': segment_width})
    min_distance = 0.0 if cfg.allow_overlap else cfg.min_marker_distance_px
    slack = cfg.height - 2 * margin - (n_markers - 1) * min_distance
    if slack < 0:
        raise PlacementError(
            'frame is too short to keep markers min_marker_distance_px apart',
            {'height': cfg.height, 'min_marker_distance_px': min_distance},
        )

    placed = []
    for segment_id in range(cfg.stent_segments):
        offsets = np.sort(rng.uniform(0.0, slack, n_markers))
        z = margin + offsets + np.arange(n_markers) * min_distance
        order = rng.permutation(n_markers)
        phi = rng.uniform(0.0, 2 * math.pi, n_markers)
        rotation = rng.uniform(0.0, 360.0, n_markers)
        for k in range(n_markers):
            placed.append(_PlacedMarker(
                spec=specs[int(order[k])],
                segment_id=segment_id,
                axis_x=(segment_id + 0.5) * segment_width,
                radius=radius,
                z=float(z[k]),
                phi=float(phi[k]),
                rotation_deg=float(rotation[k]),
            ))
    return placed


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    bg_cfg = cfg.background
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    xn = 2 * xx / max(cfg.width - 1, 1) - 1
    yn = 2 * yy / max(cfg.height - 1, 1) - 1
    alpha = rng.uniform(0.0, 2 * math.pi)
    gradient = 0.5 * bg_cfg.gradient_amplitude * (math.cos(alpha) * xn + math.sin(alpha) * yn)

    mesh_angle = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2 * math.pi, 2)
    xr = math.cos(mesh_angle) * xx + math.sin(mesh_angle) * yy
    yr = -math.sin(mesh_angle) * xx + math.cos(mesh_angle) * yy
    period = bg_cfg.mesh_period_px
    mesh = 0.5 * bg_cfg.mesh_amplitude * np.sin(2 * math.pi * xr / period + phase[0]) \
        * np.sin(2 * math.pi * yr / period + phase[1])
    return np.maximum(bg_cfg.level + gradient + mesh, 1.0)


def frame_name(setup_id: int, angle: float) -> str:
    return f's{setup_id:02d}_a{int(round(angle)):+04d}'


def _frame_rng(cfg: SceneConfig, setup_id: int, angle: float) -> np.random.Generator:
    # angles are shifted to stay non-negative for SeedSequence
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, setup_id, int(round(angle * 1000)) + 360000]))


def compose_frame(
    cfg: SceneConfig,
    setup_id: int,
    angle: float,
    pitches: Optional[Sequence[float]] = None,
) -> FrameRecord:
    """
    Renders one frame of a setup at a view angle.

    The frame is a pure function of ``(cfg, setup_id, angle)``: the setup layout is
    seeded by ``(seed, setup_id)`` and background/noise by ``(seed, setup_id, angle)``.

    Raises:
        ConfigError: If the angle is not one of ``cfg.view_angles``, the setup id is out
            of range, or the fraction targets are infeasible.
        PlacementError: If the layout does not fit the frame.
    """
    if not any(math.isclose(angle, a, abs_tol=1e-9) for a in cfg.view_angles):
        raise ConfigError('view angle is not in the scene configuration', {'angle': angle})
    if not 0 <= setup_id < cfg.n_setups:
        raise ConfigError('setup id out of range', {'setup_id': setup_id, 'n_setups': cfg.n_setups})
    pitches = list(pitches) if pitches is not None else calibrate_pitches(cfg)

    layout = _setup_layout(cfg, setup_id, pitches)
    rng = _frame_rng(cfg, setup_id, angle)
    labels = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    instances = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    theta = math.radians(angle)
    f_min = cfg.min_foreshortening

    for index, marker in enumerate(layout):
        phase = marker.phi + theta
        pose = MarkerPose(
            x=marker.axis_x + marker.radius * math.cos(phase),
            y=marker.z,
            rotation_deg=marker.rotation_deg,
            foreshortening=f_min + (1 - f_min) * abs(math.sin(phase)),
        )
        stamp = render_marker(
            marker.spec, pose, pitches[marker.spec.class_id - 1], frame_shape=(cfg.width, cfg.height),
        )
        window = (
            slice(stamp.row0, stamp.row0 + stamp.mask.shape[0]),
            slice(stamp.col0, stamp.col0 + stamp.mask.shape[1]),
        )
        labels[window][stamp.mask] = marker.spec.class_id
        instances[window][stamp.mask] = index + 1

    foreground = labels > 0
    clean = _background(cfg, rng) * (1.0 - cfg.marker_contrast * foreground)
    image = clean
    if cfg.noise.poisson_scale > 0:
        image = rng.poisson(image / cfg.noise.poisson_scale).astype(np.float64) * cfg.noise.poisson_scale
    if cfg.noise.gaussian_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise.gaussian_sigma, image.shape)
    image = np.maximum(image, 0.0)

    gt_centers = []
    for index, marker in enumerate(layout):
        class_id = marker.spec.class_id
        if cfg.stent_segments == 1:
            mask = labels == class_id
        else:
            mask = (instances == index + 1) & (labels == class_id)
        centroid = mask_centroid(mask)
        if centroid is None:
            # fully occluded in overlap mode
            continue
        gt_centers.append(CenterPoint(class_id=class_id, x=centroid[0], y=centroid[1], segment_id=marker.segment_id))
    gt_centers.sort(key=lambda c: (c.segment_id, c.class_id))

    return FrameRecord(
        frame_id=frame_name(setup_id, angle),
        image=GrayImage(pixels=image),
        labels=LabelMap(ids=labels),
        gt_centers=gt_centers,
        setup_id=setup_id,
        view_angle=float(angle),
    )


def frame_pixel_fractions(labels: LabelMap) -> List[float]:
    """Fraction of the frame occupied by each marker class 1..N."""
    total = labels.ids.size
    counts = np.bincount(labels.ids.ravel(), minlength=settings.labels.n_marker_classes + 1)
    return [float(c) / total for c in counts[1:]]


def plan_dataset(cfg: SceneConfig, split_rule: Optional[SplitRule] = None) -> List[PlannedFrame]:
    """
    Decides which (setup, angle) frames exist and which split they belong to.

    Splits are by setup, never by frame. ``dropped_setups`` setups are abandoned
    entirely, then ``missing_frames`` frames are removed from train setups only, so
    test setups keep every view angle.

    Raises:
        SplitError: If a setup is listed in both splits, is unknown, or no train setup remains.
        ConfigError: If more frames are requested missing than the train split holds.
    """
    split_rule = split_rule or SplitRule()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.n_setups]))
    setups = list(range(cfg.n_setups))
    explicit_test = set(split_rule.test_setups or [])
    explicit_train = set(split_rule.train_setups or [])

    overlap = explicit_test & explicit_train
    if overlap:
        raise SplitError('setups assigned to both train and test splits', {'setups': sorted(overlap)})
    unknown = (explicit_test | explicit_train) - set(setups)
    if unknown:
        raise SplitError('split rule names unknown setups', {'setups': sorted(unknown)})

    droppable = [s for s in setups if s not in explicit_test | explicit_train]
    if cfg.dropped_setups > len(droppable):
        raise SplitError('not enough unassigned setups to drop', {'dropped_setups': cfg.dropped_setups})
    dropped = set(int(s) for s in rng.choice(droppable, size=cfg.dropped_setups, replace=False)) \
        if cfg.dropped_setups else set()
    remaining = [s for s in setups if s not in dropped]

    if split_rule.test_setups is not None:
        test = sorted(explicit_test)
    else:
        candidates = [s for s in remaining if s not in explicit_train]
        if split_rule.n_test_setups >= len(candidates) and split_rule.train_setups is None:
            raise SplitError('test split would leave no train setups', {'n_test_setups': split_rule.n_test_setups})
        test = sorted(int(s) for s in rng.choice(candidates, size=split_rule.n_test_setups, replace=False))
    if split_rule.train_setups is not None:
        train = sorted(explicit_train)
    else:
        train = [s for s in remaining if s not in set(test)]
    if not train:
        raise SplitError('no setups left for the train split')
    if set(train) & set(test):
        raise SplitError('setups assigned to both train and test splits', {'setups': sorted(set(train) & set(test))})

    train_frames = [(s, a) for s in train for a in cfg.view_angles]
    if cfg.missing_frames >= len(train_frames):
        raise ConfigError('missing_frames removes the whole train split', {'missing_frames': cfg.missing_frames})
    missing_idx = set(int(i) for i in rng.choice(len(train_frames), size=cfg.missing_frames, replace=False)) \
        if cfg.missing_frames else set()

    planned = [PlannedFrame(setup_id=s, view_angle=a, split=Split.TEST) for s in test for a in cfg.view_angles]
    planned += [
        PlannedFrame(setup_id=s, view_angle=a, split=Split.TRAIN)
        for i, (s, a) in enumerate(train_frames) if i not in missing_idx
    ]
    planned.sort(key=lambda p: (p.setup_id, p.view_angle))
    return planned


def _write_frame(cfg: SceneConfig, planned: PlannedFrame, pitches: List[float], out_dir: str) -> FrameEntry:
    record = compose_frame(cfg, planned.setup_id, planned.view_angle, pitches)
    image_path = os.path.join('images', f'{record.frame_id}.png')
    label_path = os.path.join('labels', f'{record.frame_id}.png')
    write_gray_png(os.path.join(out_dir, image_path), record.image, bit_depth=16)
    write_label_png(os.path.join(out_dir, label_path), record.labels)
    return FrameEntry(
        frame_id=record.frame_id,
        image_path=image_path,
        label_path=label_path,
        setup_id=record.setup_id,
        view_angle_deg=record.view_angle,
        split=planned.split,
        gt_centers=record.gt_centers,
    )


def scene_config_hash(cfg: SceneConfig) -> str:
    return sha256_json(cfg.json(sort_keys=True))


def generate_dataset(cfg: SceneConfig, split_rule: Optional[SplitRule], out_dir: str) -> DatasetManifest:
    """
    Renders every planned frame to ``out_dir`` and writes ``manifest.json``.

    Frames are independent, so ``cfg.workers > 0`` renders them in a process pool;
    output is identical to serial generation.

    Returns:
        DatasetManifest: The manifest, with ``root`` set to ``out_dir``.
    """
    planned = plan_dataset(cfg, split_rule)
    pitches = calibrate_pitches(cfg)
    synth_logger.info(
        'Generating {} frames ({} train / {} test) into {}',
        len(planned),
        sum(p.split == Split.TRAIN for p in planned),
        sum(p.split == Split.TEST for p in planned),
        out_dir,
    )
    if cfg.workers > 0:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            entries = list(pool.map(
                _write_frame,
                [cfg] * len(planned), planned, [pitches] * len(planned), [out_dir] * len(planned),
            ))
    else:
        entries = [_write_frame(cfg, p, pitches, out_dir) for p in planned]

    manifest = DatasetManifest(
        header=ManifestHeader(
            seed=cfg.seed,
            config_hash=scene_config_hash(cfg),
            pixel_pitch_mm=cfg.pixel_pitch,
            width=cfg.width,
            height=cfg.height,
            n_classes=settings.labels.n_marker_classes + 1,
        ),
        frames=entries,
        root=out_dir,
    )
    save_manifest(manifest, out_dir)
    synth_logger.success('Dataset written: {} frames, config hash {}', len(entries), manifest.header.config_hash[:12])
    return manifest


def dataset_pixel_fractions(manifest: DatasetManifest) -> List[float]:
    """Mean per-class pixel fraction over every frame of a manifest."""
    fractions = [
        frame_pixel_fractions(read_label_png(os.path.join(manifest.root, entry.label_path)))
        for entry in manifest.frames
    ]
    return [float(v) for v in np.mean(np.array(fractions), axis=0)]
