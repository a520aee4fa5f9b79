import os

import numpy as np
import pytest

from markerseg.eval_metrics import extract_centers
from markerseg.pipeline import load_manifest
from markerseg.synth_fluoro import calibrate_pitches
from markerseg.synth_fluoro import compose_frame
from markerseg.synth_fluoro import dataset_pixel_fractions
from markerseg.synth_fluoro import expected_class_pixels
from markerseg.synth_fluoro import footprint_area_mm2
from markerseg.synth_fluoro import frame_pixel_fractions
from markerseg.synth_fluoro import generate_dataset
from markerseg.synth_fluoro import plan_dataset
from markerseg.synth_fluoro import render_marker
from markerseg.tests.conftest import small_scene
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import PlacementError
from markerseg.utils.exceptions import SplitError
from markerseg.utils.models.data_models import MarkerPose
from markerseg.utils.models.data_models import MarkerShape
from markerseg.utils.models.data_models import MarkerSpec
from markerseg.utils.models.data_models import Split
from markerseg.utils.models.settings_model import NoiseConfig
from markerseg.utils.models.settings_model import SceneConfig
from markerseg.utils.models.settings_model import SplitRule
from markerseg.utils.models.settings_model import default_marker_specs

CIRCLE = MarkerSpec(class_id=1, shape=MarkerShape.CIRCLE, hole_radius=0.5, length=2.6)
SPHERE = MarkerSpec(class_id=2, shape=MarkerShape.SPHERE, hole_radius=0.2, length=None)
CROSS = MarkerSpec(class_id=4, shape=MarkerShape.CROSS, hole_radius=None, length=3.0)
TRIANGLE = MarkerSpec(class_id=5, shape=MarkerShape.TRIANGLE, hole_radius=0.63, length=2.5)


def test_expected_pixels_at_full_resolution():
    counts = expected_class_pixels(SceneConfig())
    assert [round(c) for c in counts] == [79, 26, 52, 79, 79]


def test_circle_stamp_at_detector_pitch():
    stamp = render_marker(CIRCLE, MarkerPose(x=50.0, y=40.0), pitch=0.8)
    area = int(stamp.mask.sum())
    # ring of outer diameter 3.25 px around a 0.625 px hole
    assert 4 <= area <= 12
    assert stamp.mask.shape[0] >= 4


def test_symmetric_marker_centroid_is_pose():
    stamp = render_marker(SPHERE, MarkerPose(x=30.0, y=20.0), pitch=0.1)
    assert stamp.centroid == pytest.approx((30.0, 20.0), abs=1e-12)


def test_cross_has_four_fold_symmetry():
    pose = MarkerPose(x=25.0, y=25.0)
    upright = render_marker(CROSS, pose, pitch=0.2)
    turned = render_marker(CROSS, pose.copy(update={'rotation_deg': 90.0}), pitch=0.2)
    assert (upright.row0, upright.col0) == (turned.row0, turned.col0)
    assert np.array_equal(upright.mask, turned.mask)


def test_stamp_outside_frame():
    with pytest.raises(PlacementError):
        render_marker(CIRCLE, MarkerPose(x=-40.0, y=10.0), pitch=0.8, frame_shape=(32, 32))


def test_calibration_rejects_infeasible_targets():
    with pytest.raises(ConfigError):
        calibrate_pitches(small_scene(fraction_scale=0.1))
    with pytest.raises(ConfigError):
        calibrate_pitches(small_scene(pixel_pitch=0.01))


def test_compose_frame_is_deterministic(scene_cfg):
    first = compose_frame(scene_cfg, 1, 30.0)
    second = compose_frame(scene_cfg, 1, 30.0)
    assert first.frame_id == second.frame_id
    assert np.array_equal(first.image.pixels, second.image.pixels)
    assert np.array_equal(first.labels.ids, second.labels.ids)
    assert first.gt_centers == second.gt_centers


def test_compose_frame_rejects_unknown_angle(scene_cfg):
    with pytest.raises(ConfigError):
        compose_frame(scene_cfg, 0, 45.0)


def test_every_class_present_and_centers_exact(scene_cfg):
    for setup_id in range(scene_cfg.n_setups):
        for angle in scene_cfg.view_angles:
            frame = compose_frame(scene_cfg, setup_id, angle)
            assert sorted(np.unique(frame.labels.ids)) == [0, 1, 2, 3, 4, 5]
            extracted = extract_centers(frame.labels)
            for center in frame.gt_centers:
                x, y = extracted[center.class_id]
                assert abs(x - center.x) <= 1e-9
                assert abs(y - center.y) <= 1e-9


def test_noiseless_frame_thresholds_to_labels(scene_cfg):
    cfg = scene_cfg.copy(update={
        'noise': NoiseConfig(gaussian_sigma=0.0, poisson_scale=0.0),
        'marker_contrast': 1.0,
    })
    frame = compose_frame(cfg, 0, -30.0)
    assert np.array_equal(frame.image.pixels == 0, frame.labels.ids > 0)


def test_mean_fractions_within_half_of_targets(scene_cfg):
    fractions = [
        frame_pixel_fractions(compose_frame(scene_cfg, s, a).labels)
        for s in range(scene_cfg.n_setups) for a in scene_cfg.view_angles
    ]
    mean = np.mean(np.array(fractions), axis=0)
    targets = np.array(scene_cfg.fraction_targets) * scene_cfg.fraction_scale
    assert np.all(np.abs(mean - targets) / targets <= 0.5)


def test_default_plan_matches_acquisition():
    planned = plan_dataset(SceneConfig(), SplitRule())
    assert len(planned) == 158
    assert sum(p.split == Split.TRAIN for p in planned) == 80
    test = [p for p in planned if p.split == Split.TEST]
    assert len(test) == 78
    assert len({p.setup_id for p in test}) == 6


def test_plan_without_dropouts():
    planned = plan_dataset(SceneConfig(dropped_setups=0, missing_frames=0), SplitRule())
    assert len(planned) == 182


def test_plan_splits_by_setup():
    planned = plan_dataset(SceneConfig(), SplitRule())
    train = {p.setup_id for p in planned if p.split == Split.TRAIN}
    test = {p.setup_id for p in planned if p.split == Split.TEST}
    assert not train & test


def test_plan_rejects_setup_in_both_splits():
    with pytest.raises(SplitError):
        plan_dataset(SceneConfig(), SplitRule(test_setups=[0, 1], train_setups=[1, 2]))


def test_marker_specs_must_match_classes():
    cfg = small_scene(marker_specs=default_marker_specs()[:4], fraction_targets=[0.0003, 0.0001, 0.0002, 0.0003])
    with pytest.raises(ConfigError):
        calibrate_pitches(cfg)


def test_generated_dataset_manifest(small_dataset):
    assert len(small_dataset.frames) == 6
    assert len(small_dataset.split(Split.TEST)) == 2
    for entry in small_dataset.frames:
        assert os.path.exists(os.path.join(small_dataset.root, entry.image_path))
        assert os.path.exists(os.path.join(small_dataset.root, entry.label_path))
        assert len(entry.gt_centers) == 5

    reloaded = load_manifest(os.path.join(small_dataset.root, 'manifest.json'))
    assert reloaded.frames == small_dataset.frames
    assert reloaded.header == small_dataset.header


def test_parallel_generation_matches_serial(tmp_path, small_dataset):
    cfg = small_scene(workers=2)
    manifest = generate_dataset(cfg, SplitRule(n_test_setups=1), str(tmp_path))
    assert [e.frame_id for e in manifest.frames] == [e.frame_id for e in small_dataset.frames]
    assert [e.gt_centers for e in manifest.frames] == [e.gt_centers for e in small_dataset.frames]
    for ours, theirs in zip(manifest.frames, small_dataset.frames):
        with open(os.path.join(manifest.root, ours.image_path), 'rb') as a, \
                open(os.path.join(small_dataset.root, theirs.image_path), 'rb') as b:
            assert a.read() == b.read()


def test_dataset_fractions(small_dataset):
    fractions = dataset_pixel_fractions(small_dataset)
    assert len(fractions) == 5
    assert all(f > 0 for f in fractions)


def test_thin_walled_triangle_renders_solid():
    assert footprint_area_mm2(TRIANGLE) == pytest.approx(np.sqrt(3) / 4 * 2.5 ** 2)
    stamp = render_marker(TRIANGLE, MarkerPose(x=40.0, y=40.0), pitch=0.1)
    assert stamp.mask[40 - stamp.row0, 40 - stamp.col0]

    wide = TRIANGLE.copy(update={'length': 6.0})
    holed = render_marker(wide, MarkerPose(x=40.0, y=40.0), pitch=0.1)
    assert not holed.mask[40 - holed.row0, 40 - holed.col0]
