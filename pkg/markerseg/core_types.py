"""
Canonical image, label and probability representations.

Every pixel grid is row-major, indexed ``[row, col] == [y, x]``; cubes carry their
class layers on the last axis (``[y, x, n]``). Point coordinates are reported as
``(x, y)`` in pixels with ``(0, 0)`` at the centre of the top-left pixel.
"""
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import validator

from markerseg.settings.config import settings
from markerseg.utils.exceptions import DegenerateInputError
from markerseg.utils.exceptions import InvalidCubeError
from markerseg.utils.exceptions import InvalidInputError
from markerseg.utils.exceptions import InvalidLabelError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.file_utils import read_png
from markerseg.utils.file_utils import write_png
from markerseg.utils.models.data_models import NormalizationMode

SIMPLEX_TOLERANCE = 1e-5


def n_classes_default() -> int:
    """Number of layers of a label cube: background plus the configured marker classes."""
    return settings.labels.n_marker_classes + 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _grid(v, dtype, name: str) -> np.ndarray:
    array = np.array(v, dtype=dtype, copy=True)
    if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
        raise ShapeError(f'{name} must be a non-empty 2D grid', {'shape': list(array.shape)})
    return array


class _Grid(BaseModel):
    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @property
    def height(self) -> int:
        return int(self._array().shape[0])

    @property
    def width(self) -> int:
        return int(self._array().shape[1])

    def _array(self) -> np.ndarray:
        raise NotImplementedError


class GrayImage(_Grid):
    pixels: np.ndarray

    @validator('pixels', pre=True)
    def non_negative_grid(cls, v):
        array = _grid(v, np.float64, 'GrayImage')
        if not np.all(np.isfinite(array)):
            raise InvalidInputError('GrayImage contains non-finite intensities')
        if np.any(array < 0):
            raise InvalidInputError('GrayImage contains negative intensities', {'min': float(array.min())})
        return _frozen(array)

    def _array(self):
        return self.pixels


class NormalizedImage(_Grid):
    pixels: np.ndarray

    @validator('pixels', pre=True)
    def unit_interval_grid(cls, v):
        array = _grid(v, np.float64, 'NormalizedImage')
        if not np.all(np.isfinite(array)) or np.any(array < 0) or np.any(array > 1):
            raise InvalidInputError('NormalizedImage values must lie in [0, 1]')
        return _frozen(array)

    def _array(self):
        return self.pixels


def _integral(v, error_cls, name: str) -> np.ndarray:
    raw = np.asarray(v)
    if raw.dtype.kind == 'f' and not np.all(raw == np.round(raw)):
        raise error_cls(f'{name} ids must be integers')
    return raw


def _check_ids(array: np.ndarray, n_classes: int, error_cls, name: str) -> None:
    if array.size and (array.min() < 0 or array.max() >= n_classes):
        raise error_cls(
            f'{name} ids must lie in [0, {n_classes - 1}]',
            {'min': int(array.min()), 'max': int(array.max())},
        )


class LabelMap(_Grid):
    ids: np.ndarray

    @validator('ids', pre=True)
    def valid_ids(cls, v):
        array = _grid(_integral(v, InvalidLabelError, 'LabelMap'), np.int64, 'LabelMap')
        _check_ids(array, n_classes_default(), InvalidLabelError, 'LabelMap')
        return _frozen(array)

    def _array(self):
        return self.ids


class SegMap(_Grid):
    ids: np.ndarray

    @validator('ids', pre=True)
    def valid_ids(cls, v):
        array = _grid(_integral(v, InvalidLabelError, 'SegMap'), np.int64, 'SegMap')
        _check_ids(array, n_classes_default(), InvalidLabelError, 'SegMap')
        return _frozen(array)

    def _array(self):
        return self.ids


def _cube(v, dtype, name: str) -> np.ndarray:
    array = np.array(v, dtype=dtype, copy=True)
    if array.ndim != 3 or min(array.shape) < 1:
        raise ShapeError(f'{name} must be a non-empty (height, width, layers) cube', {'shape': list(array.shape)})
    return array


def check_one_hot(layers: np.ndarray) -> None:
    """
    Asserts the one-hot invariant of a label cube.

    Raises:
        InvalidCubeError: If any value is not 0/1 or a pixel does not sum to exactly 1.
    """
    if not np.all((layers == 0) | (layers == 1)):
        raise InvalidCubeError('label cube values must be 0 or 1')
    sums = layers.sum(axis=-1)
    if not np.all(sums == 1):
        bad = np.argwhere(sums != 1)[0]
        raise InvalidCubeError(
            'label cube is not one-hot',
            {'row': int(bad[0]), 'col': int(bad[1]), 'sum': float(sums[tuple(bad)])},
        )


def check_simplex(layers: np.ndarray, tol: float = SIMPLEX_TOLERANCE) -> None:
    """
    Asserts the per-pixel probability simplex invariant.

    Raises:
        InvalidCubeError: If a value leaves [0, 1] or a pixel sum differs from 1 by more than `tol`.
    """
    if not np.all(np.isfinite(layers)) or np.any(layers < 0) or np.any(layers > 1):
        raise InvalidCubeError('probability cube values must lie in [0, 1]')
    deviation = np.abs(layers.sum(axis=-1) - 1.0)
    if np.any(deviation > tol):
        raise InvalidCubeError('probability cube layers do not sum to 1', {'max_deviation': float(deviation.max())})


class LabelCube(_Grid):
    layers: np.ndarray

    @validator('layers', pre=True)
    def one_hot(cls, v):
        array = _cube(v, np.float64, 'LabelCube')
        if settings.validation.check_invariants:
            check_one_hot(array)
        return _frozen(array.astype(np.uint8))

    @property
    def n_layers(self) -> int:
        return int(self.layers.shape[-1])

    def _array(self):
        return self.layers


class ProbabilityCube(_Grid):
    layers: np.ndarray

    @validator('layers', pre=True)
    def simplex(cls, v):
        array = _cube(v, np.float64, 'ProbabilityCube')
        if settings.validation.check_invariants:
            check_simplex(array)
        return _frozen(array)

    @property
    def n_layers(self) -> int:
        return int(self.layers.shape[-1])

    def _array(self):
        return self.layers


class LogitCube(_Grid):
    layers: np.ndarray

    @validator('layers', pre=True)
    def finite(cls, v):
        array = _cube(v, np.float64, 'LogitCube')
        if not np.all(np.isfinite(array)):
            raise InvalidInputError('LogitCube contains non-finite scores')
        return _frozen(array)

    @property
    def n_layers(self) -> int:
        return int(self.layers.shape[-1])

    def _array(self):
        return self.layers


ImageLike = Union[GrayImage, NormalizedImage, np.ndarray]


def normalize_image(img: ImageLike, mode: Optional[NormalizationMode] = None) -> NormalizedImage:
    """
    Maps raw detector intensities into [0, 1].

    The default ('max') mode computes ``(I - min(I)) / max(I)``: the denominator is the
    maximum, not the range, so the output maximum is below 1 whenever ``min(I) > 0``.
    'minmax' divides by ``max - min`` instead (constant images map to zeros).

    Args:
        img: The image to normalize.
        mode: Normalization variant; defaults to ``settings.io.normalization``.

    Returns:
        NormalizedImage: The normalized image.

    Raises:
        InvalidInputError: If the image holds negative intensities.
        DegenerateInputError: If the image is all zeros.
    """
    mode = mode or settings.io.normalization
    pixels = img.pixels if isinstance(img, (GrayImage, NormalizedImage)) else GrayImage(pixels=img).pixels
    lo = pixels.min()
    hi = pixels.max()
    if hi <= 0:
        raise DegenerateInputError('cannot normalize an all-zero image', {'shape': list(pixels.shape)})
    if mode == NormalizationMode.MINMAX:
        span = hi - lo
        out = np.zeros_like(pixels) if span == 0 else (pixels - lo) / span
    else:
        out = (pixels - lo) / hi
    return NormalizedImage(pixels=np.clip(out, 0.0, 1.0))


def encode_onehot(m: LabelMap, n_classes: Optional[int] = None) -> LabelCube:
    """
    Expands a compact label map into its one-hot label cube.

    Raises:
        InvalidLabelError: If an id falls outside ``[0, n_classes - 1]``.
    """
    n_classes = n_classes or n_classes_default()
    ids = m.ids if isinstance(m, LabelMap) else np.asarray(m)
    _check_ids(ids, n_classes, InvalidLabelError, 'LabelMap')
    return LabelCube(layers=np.eye(n_classes, dtype=np.uint8)[ids])


def decode_labelmap(c: LabelCube) -> LabelMap:
    """
    Collapses a one-hot label cube back to class ids.

    Raises:
        InvalidCubeError: If the cube is not one-hot.
    """
    layers = c.layers if isinstance(c, LabelCube) else np.asarray(c)
    check_one_hot(layers)
    return LabelMap(ids=np.argmax(layers, axis=-1))


def segmap_from_probabilities(p: ProbabilityCube) -> SegMap:
    # np.argmax returns the first maximum, i.e. ties go to the smaller class id
    return SegMap(ids=np.argmax(p.layers, axis=-1))


def mask_centroid(mask: np.ndarray) -> Optional[Tuple[float, float]]:
    """
    Pixel centroid ``(mean x, mean y)`` of a boolean mask, or None for an empty mask.

    Ground-truth centers and extracted centers both go through this routine so
    that identical masks produce bit-identical centers.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(cols.mean()), float(rows.mean())


def read_gray_png(path: str) -> GrayImage:
    return GrayImage(pixels=read_png(path).astype(np.float64))


def write_gray_png(path: str, img: GrayImage, bit_depth: int = 16) -> str:
    if bit_depth not in (8, 16):
        raise InvalidInputError('PNG bit depth must be 8 or 16', {'bit_depth': bit_depth})
    dtype = np.uint16 if bit_depth == 16 else np.uint8
    limit = np.iinfo(dtype).max
    return write_png(path, np.clip(np.rint(img.pixels), 0, limit).astype(dtype))


def read_label_png(path: str) -> LabelMap:
    return LabelMap(ids=read_png(path).astype(np.int64))


def write_label_png(path: str, labels: LabelMap) -> str:
    return write_png(path, labels.ids.astype(np.uint8))
