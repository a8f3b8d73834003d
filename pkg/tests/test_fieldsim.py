import json

import numpy as np
import pytest

from engine import prediction_from_probs
from errors import FieldError
from fieldsim import (
    OracleClassifier,
    dominant_patch,
    footprint_m,
    herbicide_ml,
    load_scenario,
    medium_density_field,
    render_frame,
    simulate_run,
    spray_decide,
    target_yaw,
)
from models import FieldMap, Lighting, LightingRegion, RobotState, SprayCommand, SprayPolicy, WeedPatch

SIZE = (32, 48)


def _prediction(taxonomy, class_id, p):
    probs = np.full(16, min(p, 0.5) / 10)
    probs[class_id] = p
    return prediction_from_probs(probs, taxonomy)


# ============================================================================
# RENDERING
# ============================================================================

def test_footprint_at_default_height():
    assert footprint_m(0.3) == pytest.approx(0.3464, abs=1e-4)


def test_bare_ground_is_negative():
    image, truth = render_frame(FieldMap(), RobotState(position_m=2.0), seed=0, size=SIZE)
    assert truth == 8
    assert image.shape == (32, 48, 3) and image.dtype == np.uint8


def test_patch_under_camera_sets_ground_truth():
    field = FieldMap(patches=[WeedPatch(pos_m=1.0, class_id=13)])
    _, truth = render_frame(field, RobotState(position_m=1.0), seed=0, size=SIZE)
    assert truth == 13
    _, truth = render_frame(field, RobotState(position_m=1.2), seed=0, size=SIZE)
    assert truth == 8


def test_nearest_patch_dominates():
    field = FieldMap(patches=[WeedPatch(pos_m=1.0, class_id=13), WeedPatch(pos_m=1.08, class_id=2)])
    assert dominant_patch(field, RobotState(position_m=1.05)) == 1
    assert dominant_patch(field, RobotState(position_m=1.02)) == 0


def test_render_is_deterministic():
    field = medium_density_field(seed=1, length_m=5.0)
    state = RobotState(position_m=field.patches[0].pos_m)
    a, _ = render_frame(field, state, seed=4, size=SIZE)
    b, _ = render_frame(field, state, seed=4, size=SIZE)
    assert np.array_equal(a, b)


def test_stationary_robot_has_no_motion_blur():
    field = FieldMap(patches=[WeedPatch(pos_m=1.0, class_id=13)])
    still, _ = render_frame(field, RobotState(position_m=1.0, speed_mps=0.0), seed=0, size=SIZE)
    no_exposure, _ = render_frame(field, RobotState(position_m=1.0, speed_mps=0.3), seed=0, size=SIZE,
                                  exposure_s=0.0)
    fast, _ = render_frame(field, RobotState(position_m=1.0, speed_mps=1.0), seed=0, size=SIZE,
                           exposure_s=0.1)
    assert np.array_equal(still, no_exposure)
    assert not np.array_equal(still, fast)


def test_strong_light_region_brightens_frame():
    lighting = Lighting(regions=[LightingRegion(start_m=2.0, end_m=4.0, gain=1.6)])
    assert lighting.at(3.0) == (1.6, 0.0, 0.0)
    assert lighting.at(4.0) == (1.0, 0.0, 0.0)
    plain, _ = render_frame(FieldMap(), RobotState(position_m=3.0), seed=0, size=SIZE)
    bright, _ = render_frame(FieldMap(lighting=lighting), RobotState(position_m=3.0), seed=0, size=SIZE)
    assert bright.mean() > plain.mean()


def test_robot_outside_field_is_rejected():
    with pytest.raises(FieldError):
        render_frame(FieldMap(length_m=5.0), RobotState(position_m=6.0), seed=0, size=SIZE)


@pytest.mark.parametrize("class_id", [6, 8])
def test_field_rejects_crop_and_negative_patches(class_id):
    with pytest.raises(ValueError):
        FieldMap(patches=[WeedPatch(pos_m=1.0, class_id=class_id)])


# ============================================================================
# CONTROLLER
# ============================================================================

def test_confident_weed_is_sprayed(taxonomy):
    command = spray_decide(_prediction(taxonomy, 13, 0.95), SprayPolicy())
    assert command.spray
    assert command.duration_s == 0.5
    assert command.herbicide == "VM."
    assert command.target_yaw == 75.0


def test_flax_and_negatives_are_never_sprayed(taxonomy):
    policy = SprayPolicy()
    assert not spray_decide(_prediction(taxonomy, 6, 0.99), policy).spray
    assert not spray_decide(_prediction(taxonomy, 8, 0.99), policy).spray


def test_low_confidence_abstains(taxonomy):
    command = spray_decide(_prediction(taxonomy, 2, 0.4), SprayPolicy())
    assert not command.spray
    assert command.duration_s == 0.0
    assert command.herbicide is None


def test_yaw_is_clamped_to_gimbal_travel(taxonomy):
    assert spray_decide(_prediction(taxonomy, 2, 0.9), SprayPolicy(), bearing_deg=400.0).target_yaw == 150.0
    assert SprayCommand(spray=False, target_yaw=-5.0).target_yaw == 0.0
    assert RobotState(gimbal_yaw=170.0).gimbal_yaw == 150.0


def test_target_yaw_geometry():
    assert target_yaw(0.0, 0.3) == 75.0
    assert target_yaw(0.3, 0.3) == pytest.approx(120.0)


def test_one_minute_of_spraying_uses_78_ml():
    assert herbicide_ml(60.0) == pytest.approx(78.0)
    assert herbicide_ml(60.0, 95.6) == pytest.approx(95.6)


# ============================================================================
# RUN
# ============================================================================

def test_oracle_run_sprays_every_weed(taxonomy):
    field = medium_density_field(seed=2, length_m=6.0)
    result = simulate_run(field, OracleClassifier(taxonomy), SprayPolicy(), taxonomy, frame_size=SIZE)
    report = result.report
    assert report.weeds_total == len(field.patches) > 0
    assert report.weeds_missed == 0
    assert report.false_sprays == 0
    assert report.patch_accuracy == 1.0
    assert report.frame_accuracy == 1.0
    assert report.frames_dropped == 0
    assert report.herbicide_ml == pytest.approx(78.0 * report.spray_time_s / 60.0, rel=1e-12)
    assert report.herbicide_ml < report.baseline_ml
    assert set(report.herbicide_by_class_ml) <= {"VM.", "CT."}


def test_run_accounting_matches_event_log(taxonomy):
    field = medium_density_field(seed=3, length_m=4.0)
    result = simulate_run(field, OracleClassifier(taxonomy), SprayPolicy(), taxonomy, frame_size=SIZE,
                          duration_s=5.0)
    report = result.report
    assert report.frames_in == 51
    assert report.frames_in == report.frames_processed + report.frames_dropped
    assert len(result.events) == report.frames_processed
    assert report.spray_commands == sum(e.sprayed for e in result.events)
    assert report.baseline_ml == pytest.approx(95.6 * 5.0 / 60.0)


def test_empty_field(taxonomy):
    result = simulate_run(FieldMap(length_m=3.0), OracleClassifier(taxonomy), SprayPolicy(), taxonomy,
                          frame_size=SIZE)
    report = result.report
    assert report.weeds_total == 0
    assert report.patch_accuracy == 0.0
    assert report.herbicide_ml == 0.0
    assert report.savings_pct == pytest.approx(100.0)
    assert all(e.truth == 8 and not e.sprayed for e in result.events)


def test_empty_tank_skips_commands(taxonomy):
    field = medium_density_field(seed=2, length_m=6.0)
    result = simulate_run(field, OracleClassifier(taxonomy), SprayPolicy(), taxonomy, frame_size=SIZE,
                          tank_ml=0.5)
    report = result.report
    assert report.tank_remaining_ml == 0.0
    assert report.skipped_empty_tank > 0
    assert report.herbicide_ml == pytest.approx(0.5)
    assert report.weeds_missed > 0


def test_slow_classifier_drops_frames(taxonomy):
    field = medium_density_field(seed=2, length_m=3.0)
    result = simulate_run(field, OracleClassifier(taxonomy), SprayPolicy(), taxonomy, frame_size=SIZE,
                          service_time_ms=250.0)
    assert result.report.frames_dropped > 0


def test_invalid_run_settings(taxonomy):
    with pytest.raises(FieldError):
        simulate_run(FieldMap(), OracleClassifier(taxonomy), SprayPolicy(), taxonomy, duration_s=0.0)


# ============================================================================
# SCENARIOS
# ============================================================================

def test_medium_density_field_layout():
    field = medium_density_field(seed=0, length_m=15.0)
    positions = [p.pos_m for p in field.patches]
    gaps = np.diff(positions)
    assert {p.class_id for p in field.patches} <= {13, 2}
    assert np.all(gaps >= 0.5 - 1e-3) and np.all(gaps <= 1.0 + 1e-3)
    assert medium_density_field(seed=0) == field


def test_scenario_file_accepts_names_and_ids(tmp_path, taxonomy):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({
        "length_m": 5.0,
        "patches": [{"pos_m": 1.0, "class": "VM."}, {"pos_m": 2.5, "class_id": 2, "lateral_m": 0.01}],
    }), encoding="utf-8")
    field = load_scenario(path, taxonomy)
    assert [p.class_id for p in field.patches] == [13, 2]
    assert field.patches[1].lateral_m == 0.01


@pytest.mark.parametrize("patch", [
    {"pos_m": 1.0, "class": "flax"},
    {"pos_m": 1.0, "class": "Neg."},
    {"pos_m": 1.0, "class": "rose"},
])
def test_bad_scenarios_raise_field_error(tmp_path, taxonomy, patch):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"patches": [patch]}), encoding="utf-8")
    with pytest.raises(FieldError):
        load_scenario(path, taxonomy)


def test_oracle_scenario_run_misses_nothing(tmp_path, taxonomy):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({
        "length_m": 3.0,
        "patches": [{"pos_m": 1.0, "class": "VM."}, {"pos_m": 2.0, "class": "CT."}],
    }), encoding="utf-8")
    field = load_scenario(path, taxonomy)
    report = simulate_run(field, OracleClassifier(taxonomy), SprayPolicy(), taxonomy, frame_size=SIZE).report
    assert report.weeds_total == 2
    assert report.weeds_missed == 0
    assert report.false_sprays == 0
