"""
Dataset ingestion, augmentation and enhancement.

Geometric transforms act jointly on an image and its labels: images are resampled
bilinearly, labels with nearest neighbour so class ids are never blended. Derived
(augmented) frames are either computed on the fly from their source frame or
materialized to disk; both paths go through the same float32 rounding so they
produce identical arrays.
"""
import json
import math
import os
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
import torch
from scipy import ndimage
from skimage import exposure
from torch.utils.data import Dataset

from markerseg.core_types import LabelMap
from markerseg.core_types import NormalizedImage
from markerseg.core_types import normalize_image
from markerseg.core_types import read_gray_png
from markerseg.core_types import read_label_png
from markerseg.core_types import write_label_png
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ArtifactIOError
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.file_utils import read_json_file
from markerseg.utils.file_utils import read_npy
from markerseg.utils.file_utils import write_json_file
from markerseg.utils.file_utils import write_npy
from markerseg.utils.models.data_models import AugmentKind
from markerseg.utils.models.data_models import CenterPoint
from markerseg.utils.models.data_models import FlipMode
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.manifest_models import FrameEntry
from markerseg.utils.models.settings_model import AugmentScheme
from markerseg.utils.models.settings_model import EnhanceConfig

pipeline_logger = logger.bind(module='Pipeline')

SCHEME_A_ANGLES = [float(a) for a in range(-36, 36)]
SCHEME_B_ANGLES = [float(a) for a in range(-180, 180, 15)]
SCHEME_B_FLIPS = (FlipMode.IDENTITY, FlipMode.HORIZONTAL, FlipMode.VERTICAL)


def scheme_variants(kind: AugmentKind) -> List[Tuple[float, FlipMode]]:
    """(theta, flip) pairs a scheme derives from every source frame."""
    if kind == AugmentKind.SCHEME_A:
        return [(theta, FlipMode.IDENTITY) for theta in SCHEME_A_ANGLES]
    if kind == AugmentKind.SCHEME_B:
        return [(theta, flip) for theta in SCHEME_B_ANGLES for flip in SCHEME_B_FLIPS]
    return []


def derived_frame_id(source: str, theta: float, flip: FlipMode) -> str:
    return f'{source}_r{int(round(theta)):+04d}_f{flip.value}'


def _rotation(theta: float, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    # output -> input mapping in (row, col) coordinates, about the frame centre
    rad = math.radians(theta)
    cos_t = round(math.cos(rad), 12)
    sin_t = round(math.sin(rad), 12)
    matrix = np.array([[cos_t, sin_t], [-sin_t, cos_t]])
    centre = np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])
    return matrix, centre - matrix @ centre


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, NormalizedImage) else np.asarray(img, dtype=np.float64)


def _ids(labels) -> np.ndarray:
    return labels.ids if isinstance(labels, LabelMap) else np.asarray(labels, dtype=np.int64)


def _check_pair(pixels: np.ndarray, ids: np.ndarray) -> None:
    if pixels.shape != ids.shape:
        raise ShapeError('image and labels differ in size', {'image': list(pixels.shape), 'labels': list(ids.shape)})


def _shear_source(theta: float, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Source pixel of every output pixel for a rotation by `theta` (|theta| < 90).

    The rotation is split into three shears (x, y, x) whose per-row and per-column
    shifts are rounded to whole pixels. Each shear is then a permutation of the
    grid, and because the rounding is odd-symmetric the map for ``-theta`` is the
    exact inverse of the map for ``theta``.
    """
    sign = 1.0 if theta >= 0 else -1.0
    half = math.radians(abs(theta)) / 2
    alpha = -sign * round(math.tan(half), 12)
    beta = sign * round(math.sin(2 * half), 12)
    h, w = shape
    v = np.arange(h)[:, None] - (h - 1) / 2.0
    u = np.arange(w)[None, :] - (w - 1) / 2.0
    u1 = u + np.round(alpha * v)
    v1 = v + np.round(beta * u1)
    u2 = u1 + np.round(alpha * v1)
    rows = np.rint(v1 + (h - 1) / 2.0).astype(np.int64)
    cols = np.rint(u2 + (w - 1) / 2.0).astype(np.int64)
    return rows, cols


def _rotate_ids(ids: np.ndarray, theta: float) -> np.ndarray:
    # half turns commute with the shear map, so angles past 90 degrees split into both
    if abs(theta) > 90:
        ids = np.rot90(ids, 2)
        theta -= math.copysign(180.0, theta)
    rows, cols = _shear_source(theta, ids.shape)
    inside = (rows >= 0) & (rows < ids.shape[0]) & (cols >= 0) & (cols < ids.shape[1])
    out = np.zeros_like(ids)
    out[inside] = ids[rows[inside], cols[inside]]
    return out


def rotate_pair(img: NormalizedImage, labels: LabelMap, theta: float) -> Tuple[NormalizedImage, LabelMap]:
    """
    Rotates an image and its labels by `theta` degrees about the frame centre.

    Positive angles turn the content counter-clockwise as displayed (y axis pointing
    down). The image is resampled bilinearly. Labels are moved as whole pixels by a
    three-shear permutation that stays within 1.6 px of the exact rotation for
    |theta| <= 45, so rotating back by ``-theta`` restores every label that never
    left the frame. Quarter turns of square frames are exact for both. Uncovered
    regions take the image minimum and label 0.

    Raises:
        ContractError: If |theta| > 180.
        ShapeError: If image and labels differ in size.
    """
    if abs(theta) > 180:
        raise ContractError('rotation angle must lie in [-180, 180]', {'theta': theta})
    pixels, ids = _pixels(img), _ids(labels)
    _check_pair(pixels, ids)
    if theta % 180 == 0 or (theta % 90 == 0 and pixels.shape[0] == pixels.shape[1]):
        k = int(theta // 90)
        return NormalizedImage(pixels=np.rot90(pixels, k)), LabelMap(ids=np.rot90(ids, k))
    matrix, offset = _rotation(theta, pixels.shape)
    rotated = ndimage.affine_transform(
        pixels, matrix, offset=offset, order=1, mode='constant', cval=float(pixels.min()),
    )
    return NormalizedImage(pixels=np.clip(rotated, 0.0, 1.0)), LabelMap(ids=_rotate_ids(ids, theta))


def flip_pair(img: NormalizedImage, labels: LabelMap, flip: FlipMode) -> Tuple[NormalizedImage, LabelMap]:
    pixels, ids = _pixels(img), _ids(labels)
    _check_pair(pixels, ids)
    if flip == FlipMode.HORIZONTAL:
        pixels, ids = pixels[:, ::-1], ids[:, ::-1]
    elif flip == FlipMode.VERTICAL:
        pixels, ids = pixels[::-1, :], ids[::-1, :]
    return NormalizedImage(pixels=pixels), LabelMap(ids=ids)


def transform_center(x: float, y: float, theta: float, flip: FlipMode, width: int, height: int) -> Tuple[float, float]:
    """Maps a point through ``rotate_pair`` by `theta` followed by ``flip_pair``."""
    rad = math.radians(theta)
    cos_t = round(math.cos(rad), 12)
    sin_t = round(math.sin(rad), 12)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    dx, dy = x - cx, y - cy
    x_out = cx + dx * cos_t + dy * sin_t
    y_out = cy - dx * sin_t + dy * cos_t
    if flip == FlipMode.HORIZONTAL:
        x_out = width - 1 - x_out
    elif flip == FlipMode.VERTICAL:
        y_out = height - 1 - y_out
    return x_out, y_out


def augment(
    manifest: DatasetManifest,
    scheme: AugmentScheme,
    split: Split = Split.TRAIN,
) -> DatasetManifest:
    """
    Replaces every train frame by its 72 scheme variants.

    Derived entries keep the source's image and label paths and record the
    provenance (source id, theta, flip); centers are transformed analytically.
    Test frames are carried over untouched.

    Args:
        manifest: Dataset manifest to augment.
        scheme: Augmentation scheme; kind 'none' returns the manifest unchanged.
        split: Split to augment. Only the train split may be augmented.

    Returns:
        DatasetManifest: A new manifest sharing the input's root.

    Raises:
        ContractError: If asked to augment the test split or an already augmented manifest.
    """
    if split != Split.TRAIN:
        raise ContractError('only the train split may be augmented', {'split': split.value})
    variants = scheme_variants(scheme.kind)
    if not variants:
        return manifest
    if any(entry.source is not None for entry in manifest.frames):
        raise ContractError('manifest is already augmented')

    width, height = manifest.header.width, manifest.header.height
    frames = []
    for entry in manifest.frames:
        if entry.split != Split.TRAIN:
            frames.append(entry)
            continue
        for theta, flip in variants:
            centers = []
            for center in entry.gt_centers:
                x, y = transform_center(center.x, center.y, theta, flip, width, height)
                centers.append(CenterPoint(class_id=center.class_id, x=x, y=y, segment_id=center.segment_id))
            frames.append(entry.copy(update={
                'frame_id': derived_frame_id(entry.frame_id, theta, flip),
                'gt_centers': centers,
                'source': entry.frame_id,
                'theta': theta,
                'flip': flip,
                'materialized': False,
            }))
    pipeline_logger.info(
        'Augmented {} train frames into {} with {}',
        len(manifest.split(Split.TRAIN)), len(frames) - len(manifest.split(Split.TEST)), scheme.kind.value,
    )
    return DatasetManifest(header=manifest.header, frames=frames, root=manifest.root)


def rescale_percentile(img: NormalizedImage, low: float = 1.0, high: float = 99.0) -> NormalizedImage:
    """Maps the `low`/`high` intensity percentiles to 0 and 1, saturating outside."""
    pixels = _pixels(img)
    lo, hi = np.percentile(pixels, [low, high])
    if hi <= lo:
        return NormalizedImage(pixels=pixels)
    return NormalizedImage(pixels=np.clip((pixels - lo) / (hi - lo), 0.0, 1.0))


def clahe(img: NormalizedImage, tiles: int = 8, clip_limit: float = 0.01) -> NormalizedImage:
    pixels = _pixels(img)
    if pixels.max() == pixels.min():
        return NormalizedImage(pixels=pixels)
    kernel = (max(1, math.ceil(pixels.shape[0] / tiles)), max(1, math.ceil(pixels.shape[1] / tiles)))
    out = exposure.equalize_adapthist(pixels, kernel_size=kernel, clip_limit=clip_limit)
    return NormalizedImage(pixels=np.clip(out, 0.0, 1.0))


def enhance(img: NormalizedImage, cfg: Optional[EnhanceConfig] = None) -> NormalizedImage:
    """
    Percentile rescale followed by contrast-limited adaptive histogram equalization.

    A constant image has no defined rescale and is returned unchanged.
    """
    cfg = cfg or EnhanceConfig(enabled=True)
    pixels = _pixels(img)
    if pixels.max() == pixels.min():
        return NormalizedImage(pixels=pixels)
    rescaled = rescale_percentile(NormalizedImage(pixels=pixels), cfg.low_percentile, cfg.high_percentile)
    return clahe(rescaled, cfg.tiles, cfg.clip_limit)


def save_manifest(manifest: DatasetManifest, out_dir: str, file_name: str = 'manifest.json') -> str:
    return write_json_file(out_dir, file_name, json.loads(manifest.json(exclude={'root'})), pipeline_logger)


def load_manifest(path: str) -> DatasetManifest:
    """
    Reads a dataset manifest written by ``save_manifest``.

    Entry paths resolve against the manifest's directory, so any directory laid out
    this way (synthetic or an external acquisition) can be ingested.
    """
    try:
        data = read_json_file(path, pipeline_logger)
    except FileNotFoundError as exc:
        raise ArtifactIOError(path, exc) from exc
    manifest = DatasetManifest.parse_obj(data)
    manifest.root = os.path.dirname(os.path.abspath(path))
    return manifest


def _derived_arrays(entry: FrameEntry, root: str) -> Tuple[np.ndarray, np.ndarray]:
    image = normalize_image(read_gray_png(os.path.join(root, entry.image_path)))
    labels = read_label_png(os.path.join(root, entry.label_path))
    if entry.source is not None:
        image, labels = rotate_pair(image, labels, entry.theta)
        image, labels = flip_pair(image, labels, entry.flip)
    return image.pixels.astype(np.float32), labels.ids


def load_frame(
    entry: FrameEntry,
    root: str,
    enhance_cfg: Optional[EnhanceConfig] = None,
) -> Tuple[NormalizedImage, LabelMap]:
    """
    Loads one frame as a normalized image and its labels.

    Source frames are normalized from their PNG; derived frames are transformed from
    their source or read back from their materialized arrays. Enhancement, when
    enabled, runs last.
    """
    if entry.materialized:
        pixels = read_npy(os.path.join(root, entry.image_path))
        ids = read_label_png(os.path.join(root, entry.label_path)).ids
    else:
        pixels, ids = _derived_arrays(entry, root)
    image = NormalizedImage(pixels=np.clip(pixels.astype(np.float64), 0.0, 1.0))
    if enhance_cfg is not None and enhance_cfg.enabled:
        image = enhance(image, enhance_cfg)
    return image, LabelMap(ids=ids)


def materialize(manifest: DatasetManifest, out_dir: str) -> DatasetManifest:
    """
    Writes every derived frame to `out_dir` and returns a manifest pointing at them.

    Images are stored as float32 ``.npy`` and labels as PNG; source frames keep
    their files, referenced relative to `out_dir`.
    """
    frames = []
    written = 0
    for entry in manifest.frames:
        if entry.source is None or entry.materialized:
            source_root = manifest.root
            frames.append(entry.copy(update={
                'image_path': os.path.relpath(os.path.join(source_root, entry.image_path), out_dir),
                'label_path': os.path.relpath(os.path.join(source_root, entry.label_path), out_dir),
            }))
            continue
        pixels, ids = _derived_arrays(entry, manifest.root)
        image_path = os.path.join('derived', 'images', f'{entry.frame_id}.npy')
        label_path = os.path.join('derived', 'labels', f'{entry.frame_id}.png')
        write_npy(os.path.join(out_dir, image_path), pixels)
        write_label_png(os.path.join(out_dir, label_path), LabelMap(ids=ids))
        frames.append(entry.copy(update={'image_path': image_path, 'label_path': label_path, 'materialized': True}))
        written += 1
    pipeline_logger.info('Materialized {} derived frames into {}', written, out_dir)
    materialized = DatasetManifest(header=manifest.header, frames=frames, root=out_dir)
    save_manifest(materialized, out_dir)
    return materialized


class FrameDataset(Dataset):
    """Torch view of one split: ``(image[1, H, W] float32, labels[H, W] int64)`` pairs."""

    def __init__(
        self,
        manifest: DatasetManifest,
        split: Optional[Split] = Split.TRAIN,
        enhance_cfg: Optional[EnhanceConfig] = None,
    ):
        self.root = manifest.root
        self.entries = manifest.frames if split is None else manifest.split(split)
        self.enhance_cfg = enhance_cfg

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        image, labels = load_frame(self.entries[index], self.root, self.enhance_cfg)
        return (
            torch.from_numpy(image.pixels.astype(np.float32)).unsqueeze(0),
            torch.from_numpy(labels.ids.astype(np.int64)),
        )
