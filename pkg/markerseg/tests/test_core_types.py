import numpy as np
import pytest

from markerseg.core_types import GrayImage
from markerseg.core_types import LabelCube
from markerseg.core_types import LabelMap
from markerseg.core_types import NormalizedImage
from markerseg.core_types import ProbabilityCube
from markerseg.core_types import SegMap
from markerseg.core_types import decode_labelmap
from markerseg.core_types import encode_onehot
from markerseg.core_types import mask_centroid
from markerseg.core_types import normalize_image
from markerseg.core_types import read_gray_png
from markerseg.core_types import read_label_png
from markerseg.core_types import segmap_from_probabilities
from markerseg.core_types import write_gray_png
from markerseg.core_types import write_label_png
from markerseg.utils.exceptions import DegenerateInputError
from markerseg.utils.exceptions import InvalidCubeError
from markerseg.utils.exceptions import InvalidInputError
from markerseg.utils.exceptions import InvalidLabelError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.models.data_models import NormalizationMode


def test_normalize_divides_by_maximum():
    out = normalize_image(np.array([[0.0, 128.0, 255.0]]))
    np.testing.assert_allclose(out.pixels, [[0.0, 128 / 255, 1.0]])


def test_normalize_keeps_printed_denominator_when_minimum_positive():
    out = normalize_image(np.array([[100.0, 200.0]]))
    np.testing.assert_allclose(out.pixels, [[0.0, 0.5]])


def test_normalize_minmax_mode_spans_unit_interval():
    out = normalize_image(np.array([[100.0, 200.0]]), NormalizationMode.MINMAX)
    np.testing.assert_allclose(out.pixels, [[0.0, 1.0]])


def test_normalize_constant_image_is_zero():
    out = normalize_image(np.full((2, 3), 7.0))
    assert np.all(out.pixels == 0)


def test_normalize_is_idempotent_when_minimum_is_zero(rng):
    img = rng.uniform(0, 1000, (8, 8))
    img[0, 0] = 0.0
    once = normalize_image(img)
    twice = normalize_image(once)
    np.testing.assert_allclose(twice.pixels, once.pixels)


def test_normalize_rejects_degenerate_and_negative_input():
    with pytest.raises(DegenerateInputError):
        normalize_image(np.zeros((4, 4)))
    with pytest.raises(InvalidInputError):
        normalize_image(np.array([[-1.0, 2.0]]))


def test_encode_all_background():
    cube = encode_onehot(LabelMap(ids=np.zeros((3, 4), dtype=int)))
    assert cube.layers.shape == (3, 4, 6)
    assert np.all(cube.layers[..., 0] == 1)
    assert np.all(cube.layers[..., 1:] == 0)


def test_encode_single_pixel():
    ids = np.zeros((5, 5), dtype=int)
    ids[2, 3] = 3
    cube = encode_onehot(LabelMap(ids=ids))
    assert cube.layers[..., 3].sum() == 1
    assert cube.layers[2, 3, 3] == 1


def test_encode_decode_inverse(rng):
    ids = rng.integers(0, 6, (16, 12))
    labels = LabelMap(ids=ids)
    assert np.array_equal(decode_labelmap(encode_onehot(labels)).ids, ids)
    cube = encode_onehot(labels)
    assert np.array_equal(encode_onehot(decode_labelmap(cube)).layers, cube.layers)


def test_label_ids_out_of_range():
    with pytest.raises(InvalidLabelError):
        LabelMap(ids=np.array([[0, 6]]))
    with pytest.raises(InvalidLabelError):
        encode_onehot(np.array([[0, 7]]))


def test_decode_rejects_two_hot_pixel():
    layers = np.zeros((2, 2, 6), dtype=np.uint8)
    layers[..., 0] = 1
    layers[1, 1, 4] = 1
    with pytest.raises(InvalidCubeError):
        decode_labelmap(layers)
    with pytest.raises(InvalidCubeError):
        LabelCube(layers=layers)


@pytest.mark.parametrize('value', [1.5, 257.0, -1.0])
def test_label_cube_rejects_non_binary_values(value):
    layers = np.zeros((1, 1, 6))
    layers[0, 0, 0] = value
    with pytest.raises(InvalidCubeError):
        LabelCube(layers=layers)
    with pytest.raises(InvalidCubeError):
        decode_labelmap(layers)


def test_label_cube_keeps_valid_float_input():
    layers = np.zeros((1, 2, 6))
    layers[0, 0, 3] = layers[0, 1, 0] = 1.0
    cube = LabelCube(layers=layers)
    assert cube.layers.dtype == np.uint8
    assert decode_labelmap(cube).ids.tolist() == [[3, 0]]


def test_fractional_ids_are_rejected():
    with pytest.raises(InvalidLabelError):
        SegMap(ids=np.array([[0.0, 1.7]]))
    with pytest.raises(InvalidLabelError):
        LabelMap(ids=np.array([[0.0, 1.7]]))
    assert SegMap(ids=np.array([[0.0, 2.0]])).ids.tolist() == [[0, 2]]


def test_probability_cube_simplex():
    layers = np.full((2, 2, 6), 1 / 6)
    assert ProbabilityCube(layers=layers).n_layers == 6
    with pytest.raises(InvalidCubeError):
        ProbabilityCube(layers=np.full((2, 2, 6), 0.2))


def test_argmax_ties_go_to_smaller_id():
    layers = np.zeros((1, 1, 6))
    layers[0, 0, 2] = 0.5
    layers[0, 0, 4] = 0.5
    assert segmap_from_probabilities(ProbabilityCube(layers=layers)).ids[0, 0] == 2


def test_grids_are_read_only_and_two_dimensional():
    img = NormalizedImage(pixels=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0
    with pytest.raises(ShapeError):
        GrayImage(pixels=np.zeros(4))


def test_mask_centroid():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2, 3] = mask[4, 5] = True
    assert mask_centroid(mask) == (4.0, 3.0)
    assert mask_centroid(np.zeros((3, 3), dtype=bool)) is None


def test_png_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 65535, (9, 7)).astype(np.float64)
    path = write_gray_png(str(tmp_path / 'img.png'), GrayImage(pixels=pixels))
    assert np.array_equal(read_gray_png(path).pixels, pixels)

    ids = rng.integers(0, 6, (9, 7))
    path = write_label_png(str(tmp_path / 'labels.png'), LabelMap(ids=ids))
    assert np.array_equal(read_label_png(path).ids, ids)
