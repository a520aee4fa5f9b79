import numpy as np
import pytest
import torch

from markerseg.core_types import LabelMap
from markerseg.core_types import NormalizedImage
from markerseg.eval_metrics import extract_centers
from markerseg.pipeline import FrameDataset
from markerseg.pipeline import augment
from markerseg.pipeline import derived_frame_id
from markerseg.pipeline import enhance
from markerseg.pipeline import flip_pair
from markerseg.pipeline import load_frame
from markerseg.pipeline import materialize
from markerseg.pipeline import rescale_percentile
from markerseg.pipeline import rotate_pair
from markerseg.pipeline import scheme_variants
from markerseg.pipeline import transform_center
from markerseg.utils.exceptions import ContractError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.models.data_models import AugmentKind
from markerseg.utils.models.data_models import CenterPoint
from markerseg.utils.models.data_models import FlipMode
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.manifest_models import DatasetManifest
from markerseg.utils.models.manifest_models import FrameEntry
from markerseg.utils.models.manifest_models import ManifestHeader
from markerseg.utils.models.settings_model import AugmentScheme
from markerseg.utils.models.settings_model import EnhanceConfig


def listing_manifest(n_train: int, n_test: int) -> DatasetManifest:
    def entry(index: int, split: Split) -> FrameEntry:
        return FrameEntry(
            frame_id=f'f{index:03d}',
            image_path=f'images/f{index:03d}.png',
            label_path=f'labels/f{index:03d}.png',
            setup_id=index // 13,
            view_angle_deg=0.0,
            split=split,
            gt_centers=[CenterPoint(class_id=1, x=10.0, y=20.0)],
        )

    frames = [entry(i, Split.TRAIN) for i in range(n_train)]
    frames += [entry(n_train + i, Split.TEST) for i in range(n_test)]
    header = ManifestHeader(seed=0, config_hash='x', pixel_pitch_mm=0.8, width=512, height=512, n_classes=6)
    return DatasetManifest(header=header, frames=frames)


def single_source(manifest: DatasetManifest) -> DatasetManifest:
    first = manifest.split(Split.TRAIN)[0]
    return manifest.copy(update={'frames': [first] + manifest.split(Split.TEST)})


@pytest.mark.parametrize('kind', [AugmentKind.SCHEME_A, AugmentKind.SCHEME_B])
def test_augmentation_yields_5760_training_frames(kind):
    augmented = augment(listing_manifest(80, 78), AugmentScheme(kind=kind))
    assert len(augmented.split(Split.TRAIN)) == 5760
    assert len(augmented.split(Split.TEST)) == 78
    assert len({e.frame_id for e in augmented.frames}) == len(augmented.frames)


def test_scheme_variant_counts():
    assert len(scheme_variants(AugmentKind.SCHEME_A)) == 72
    b = scheme_variants(AugmentKind.SCHEME_B)
    assert len(b) == 72
    assert len({theta for theta, _ in b}) == 24
    assert {flip for _, flip in b} == {FlipMode.IDENTITY, FlipMode.HORIZONTAL, FlipMode.VERTICAL}


def test_augment_records_provenance():
    augmented = augment(listing_manifest(1, 0), AugmentScheme(kind=AugmentKind.SCHEME_A))
    entry = augmented.by_id()[derived_frame_id('f000', -36.0, FlipMode.IDENTITY)]
    assert entry.frame_id == 'f000_r-36_fnone'
    assert entry.source == 'f000'
    assert entry.theta == -36.0
    assert entry.image_path == 'images/f000.png'


def test_scheme_none_leaves_manifest_unchanged():
    manifest = listing_manifest(3, 2)
    assert augment(manifest, AugmentScheme(kind=AugmentKind.NONE)) is manifest


def test_augment_contract_errors():
    manifest = listing_manifest(2, 2)
    with pytest.raises(ContractError):
        augment(manifest, AugmentScheme(kind=AugmentKind.SCHEME_A), split=Split.TEST)
    augmented = augment(manifest, AugmentScheme(kind=AugmentKind.SCHEME_A))
    with pytest.raises(ContractError):
        augment(augmented, AugmentScheme(kind=AugmentKind.SCHEME_B))


def test_rotate_zero_is_identity(rng):
    img = NormalizedImage(pixels=rng.uniform(0, 1, (16, 16)))
    labels = LabelMap(ids=rng.integers(0, 6, (16, 16)))
    out_img, out_labels = rotate_pair(img, labels, 0.0)
    assert np.array_equal(out_img.pixels, img.pixels)
    assert np.array_equal(out_labels.ids, labels.ids)


def test_rotate_90_moves_pixel_to_mapped_coordinate():
    ids = np.zeros((9, 9), dtype=int)
    ids[1, 2] = 3
    pixels = np.zeros((9, 9))
    pixels[1, 2] = 0.8
    out_img, out_labels = rotate_pair(NormalizedImage(pixels=pixels), LabelMap(ids=ids), 90.0)
    # (x, y) -> (cx + (y - cy), cy - (x - cx)) with cx = cy = 4
    x_out, y_out = 1, 6
    assert out_labels.ids[y_out, x_out] == 3
    assert np.count_nonzero(out_labels.ids) == 1
    assert out_img.pixels[y_out, x_out] == pytest.approx(0.8)
    assert transform_center(2.0, 1.0, 90.0, FlipMode.IDENTITY, 9, 9) == pytest.approx((x_out, y_out))


def test_rotate_quarter_turn_round_trip_is_exact(rng):
    img = NormalizedImage(pixels=rng.uniform(0, 1, (12, 12)))
    labels = LabelMap(ids=rng.integers(0, 6, (12, 12)))
    there = rotate_pair(img, labels, 90.0)
    back_img, back_labels = rotate_pair(*there, -90.0)
    assert np.array_equal(back_labels.ids, labels.ids)
    np.testing.assert_allclose(back_img.pixels, img.pixels, atol=1e-12)


def inscribed(ids: np.ndarray, inset: float = 3.0) -> np.ndarray:
    h, w = ids.shape
    rows, cols = np.ogrid[:h, :w]
    outside = np.hypot(rows - (h - 1) / 2, cols - (w - 1) / 2) > min(h, w) / 2 - inset
    out = ids.copy()
    out[outside] = 0
    return out


@pytest.mark.parametrize('theta', [float(t) for t in range(-36, 36, 5)] + [105.0, -150.0, 165.0])
def test_rotate_back_restores_generated_labels(small_dataset, theta):
    for entry in small_dataset.frames:
        img, labels = load_frame(entry, small_dataset.root)
        ids = inscribed(labels.ids)
        foreground = np.count_nonzero(ids)
        assert foreground > 0
        there = rotate_pair(img, LabelMap(ids=ids), theta)
        _, back = rotate_pair(*there, -theta)
        hamming = np.count_nonzero(back.ids != ids)
        assert hamming <= 0.02 * foreground
        assert hamming == 0


@pytest.mark.parametrize('theta', [-35.0, -12.0, 7.0, 23.0, 35.0])
def test_rotated_labels_stay_near_exact_rotation(theta):
    ids = np.zeros((64, 64), dtype=int)
    ids[10:16, 40:47] = 3
    _, out = rotate_pair(NormalizedImage(pixels=np.zeros((64, 64))), LabelMap(ids=ids), theta)
    assert np.count_nonzero(out.ids == 3) == 42
    x, y = extract_centers(out.ids, connectivity=8)[3]
    expected = transform_center(43.0, 12.5, theta, FlipMode.IDENTITY, 64, 64)
    assert np.hypot(x - expected[0], y - expected[1]) <= 1.6


def test_rotation_never_invents_classes(rng):
    ids = np.zeros((32, 32), dtype=int)
    ids[10:14, 8:12] = 2
    ids[20:22, 18:25] = 5
    _, out = rotate_pair(NormalizedImage(pixels=np.zeros((32, 32))), LabelMap(ids=ids), 23.0)
    assert set(np.unique(out.ids)) <= {0, 2, 5}


def test_rotation_argument_checks():
    img = NormalizedImage(pixels=np.zeros((4, 4)))
    with pytest.raises(ContractError):
        rotate_pair(img, LabelMap(ids=np.zeros((4, 4), dtype=int)), 181.0)
    with pytest.raises(ShapeError):
        rotate_pair(img, LabelMap(ids=np.zeros((4, 5), dtype=int)), 10.0)


def test_flip_and_transform_center_agree():
    ids = np.zeros((6, 8), dtype=int)
    ids[1, 2] = 4
    img = NormalizedImage(pixels=np.zeros((6, 8)))
    _, h = flip_pair(img, LabelMap(ids=ids), FlipMode.HORIZONTAL)
    _, v = flip_pair(img, LabelMap(ids=ids), FlipMode.VERTICAL)
    assert h.ids[1, 5] == 4
    assert v.ids[4, 2] == 4
    assert transform_center(2.0, 1.0, 0.0, FlipMode.HORIZONTAL, 8, 6) == (5.0, 1.0)
    assert transform_center(2.0, 1.0, 0.0, FlipMode.VERTICAL, 8, 6) == (2.0, 4.0)


def test_augmented_centers_follow_rotated_labels(small_dataset):
    augmented = augment(single_source(small_dataset), AugmentScheme(kind=AugmentKind.SCHEME_B))
    derived = [e for e in augmented.split(Split.TRAIN)][::7]
    for entry in derived:
        _, labels = load_frame(entry, augmented.root)
        extracted = extract_centers(labels)
        for center in entry.gt_centers:
            # markers rotated out of (or across) the frame border lose pixels;
            # labels move by whole pixels along sheared rows and columns
            if not (10 <= center.x <= 117 and 10 <= center.y <= 117):
                continue
            x, y = extracted[center.class_id]
            assert np.hypot(x - center.x, y - center.y) <= 2.0


def test_materialized_frames_match_on_the_fly(small_dataset, tmp_path):
    augmented = augment(single_source(small_dataset), AugmentScheme(kind=AugmentKind.SCHEME_A))
    stored = materialize(augmented, str(tmp_path))
    on_the_fly = augmented.by_id()
    for entry in stored.frames[::9]:
        a_img, a_labels = load_frame(entry, stored.root)
        b_img, b_labels = load_frame(on_the_fly[entry.frame_id], augmented.root)
        assert np.array_equal(a_img.pixels, b_img.pixels)
        assert np.array_equal(a_labels.ids, b_labels.ids)


def test_two_level_image_rescales_to_unit_range():
    pixels = np.full((10, 10), 0.4)
    pixels[:, 5:] = 0.6
    out = rescale_percentile(NormalizedImage(pixels=pixels))
    assert set(np.unique(out.pixels)) == {0.0, 1.0}


def test_enhance_keeps_shape_range_and_is_deterministic(rng):
    img = NormalizedImage(pixels=rng.uniform(0.2, 0.7, (64, 64)))
    first = enhance(img)
    second = enhance(img)
    assert first.pixels.shape == (64, 64)
    assert first.pixels.min() >= 0.0 and first.pixels.max() <= 1.0
    assert np.array_equal(first.pixels, second.pixels)


def test_enhance_constant_image_is_unchanged():
    img = NormalizedImage(pixels=np.full((16, 16), 0.3))
    assert np.array_equal(enhance(img).pixels, img.pixels)


def test_frame_dataset_tensors(small_dataset):
    data = FrameDataset(small_dataset, Split.TRAIN, EnhanceConfig(enabled=True))
    assert len(data) == 4
    image, labels = data[0]
    assert image.shape == (1, 128, 128) and image.dtype == torch.float32
    assert labels.shape == (128, 128) and labels.dtype == torch.int64
