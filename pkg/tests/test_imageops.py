import numpy as np
import pytest
from pydantic import ValidationError

from errors import ImageArgumentError
from imageops import (
    augment,
    augment_batch,
    check_quad,
    image_quad,
    motion_blur,
    perspective_warp,
    preview_grid,
    resize,
    rotate,
    to_model_input,
)
from models import AugmentationPolicy


def test_resize_same_size_is_exact_copy(rgb_image):
    out = resize(rgb_image, target_w=60, target_h=40)
    assert out is not rgb_image
    assert np.array_equal(out, rgb_image)


def test_resize_changes_shape(rgb_image):
    assert resize(rgb_image, target_w=24, target_h=16).shape == (16, 24, 3)


def test_resize_rejects_bad_input():
    with pytest.raises(ImageArgumentError):
        resize(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ImageArgumentError):
        resize(np.zeros((4, 4, 3), dtype=np.float32))


def test_model_input_is_nchw_unit_range(rgb_image):
    batch = to_model_input([rgb_image, rgb_image])
    assert batch.shape == (2, 3, 40, 60)
    assert batch.dtype == np.float32
    assert 0.0 <= batch.min() and batch.max() <= 1.0
    assert batch[0, 1, 5, 7] == pytest.approx(rgb_image[5, 7, 1] / 255.0)


def test_zero_offset_warp_is_identity(rgb_image):
    out = perspective_warp(rgb_image, np.zeros((4, 2)))
    assert np.array_equal(out, rgb_image)


def test_self_intersecting_quad_is_rejected(rgb_image):
    offsets = np.array([[59.0, 0.0], [-59.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ImageArgumentError):
        perspective_warp(rgb_image, offsets)


def test_warp_offsets_respect_jitter_bound(rgb_image):
    offsets = np.full((4, 2), 5.0)
    with pytest.raises(ImageArgumentError):
        perspective_warp(rgb_image, offsets, jitter=0.1)


def test_image_quad_is_convex():
    check_quad(image_quad(40, 60))


def test_full_turn_rotation_is_noop(rgb_image):
    assert rotate(rgb_image, 360.0) is rgb_image


def test_short_motion_blur_is_noop(rgb_image):
    assert np.array_equal(motion_blur(rgb_image, 1.4), rgb_image)
    assert not np.array_equal(motion_blur(rgb_image, 6.0), rgb_image)


def test_augment_is_seeded(rgb_image):
    policy = AugmentationPolicy()
    a = augment(rgb_image, policy, rng_seed=42)
    b = augment(rgb_image, policy, rng_seed=42)
    assert np.array_equal(a, b)
    assert a.shape == rgb_image.shape and a.dtype == np.uint8


def test_identity_policy_leaves_image_untouched(rgb_image):
    policy = AugmentationPolicy.identity()
    assert policy.is_identity
    out = augment(rgb_image, policy, rng_seed=3)
    assert out is not rgb_image
    assert np.array_equal(out, rgb_image)


def test_forced_flip_mirrors_columns(rgb_image):
    policy = AugmentationPolicy.identity(flip_prob=1.0)
    assert np.array_equal(augment(rgb_image, policy, rng_seed=0), rgb_image[:, ::-1])


def test_intensity_stages_clamp_and_floor():
    image = np.full((8, 8, 3), 250, dtype=np.uint8)
    policy = AugmentationPolicy.identity(pixel_shift=(20.0, 20.0), intensity_scale=(0.8, 0.8))
    out = augment(image, policy, rng_seed=0)
    # 250 + 20 clamps to 255 before the gain: floor(255 * 0.8) == 204
    assert np.all(out == 204)


def test_policy_ranges_are_validated():
    with pytest.raises(ValidationError):
        AugmentationPolicy(scale_x=(0.4, 1.0))
    with pytest.raises(ValidationError):
        AugmentationPolicy(channel_shift=(10.0, -10.0))


def test_batch_augmentation_ignores_worker_count(rgb_image):
    images = [rgb_image] * 6
    seeds = list(range(6))
    serial = augment_batch(images, AugmentationPolicy(), seeds, workers=1)
    threaded = augment_batch(images, AugmentationPolicy(), seeds, workers=3)
    assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))


def test_preview_grid_shape(rgb_image):
    grid = preview_grid([[rgb_image] * 3, [rgb_image] * 3], pad=2)
    assert grid.shape == (2 * 42 + 2, 3 * 62 + 2, 3)
