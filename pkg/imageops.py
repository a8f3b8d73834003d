"""
Raster operations: resize, seeded augmentation, perspective warp.

Images are HxWx3 uint8 numpy arrays in RGB order. Model inputs are NCHW
float32 in [0, 1].
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import cv2
import numpy as np

from errors import ImageArgumentError
from models import AugmentationPolicy

logger = logging.getLogger(__name__)

# Corner order of perspective quads: TL, TR, BR, BL.


def as_image(array: np.ndarray) -> np.ndarray:
    """Validate an HxWx3 uint8 raster and return it C-contiguous."""
    if array.ndim != 3 or array.shape[2] != 3:
        raise ImageArgumentError(f"expected HxWx3 image, got shape {array.shape}")
    if array.shape[0] == 0 or array.shape[1] == 0:
        raise ImageArgumentError("empty image")
    if array.dtype != np.uint8:
        raise ImageArgumentError(f"expected uint8 image, got {array.dtype}")
    return np.ascontiguousarray(array)


def read_png(path: str) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise OSError(f"cannot decode image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_png(path: str, image: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(as_image(image), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image {path}")


def resize(image: np.ndarray, target_w: int = 384, target_h: int = 224) -> np.ndarray:
    """Bilinear resize to (target_h, target_w); same size returns an exact copy."""
    image = as_image(image)
    if target_w <= 0 or target_h <= 0:
        raise ImageArgumentError(f"target size must be positive, got {target_w}x{target_h}")
    if image.shape[0] == target_h and image.shape[1] == target_w:
        return image.copy()
    return cv2.resize(image, (target_w, target_h), interpolation=cv2.INTER_LINEAR)


def to_model_input(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack rasters into an NCHW float32 batch scaled by 1/255."""
    batch = np.stack([as_image(im) for im in images]).astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


# ============================================================================
# GEOMETRY
# ============================================================================

def image_quad(height: int, width: int) -> np.ndarray:
    return np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)


def check_quad(quad: np.ndarray) -> None:
    """Reject self-intersecting or non-convex quads."""
    quad = np.asarray(quad, dtype=np.float64)
    crosses = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    crosses = np.array(crosses)
    if not (np.all(crosses > 0) or np.all(crosses < 0)):
        raise ImageArgumentError(f"degenerate perspective quad {quad.tolist()}")


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective transform taking the four `src` points onto `dst`."""
    check_quad(dst)
    return cv2.getPerspectiveTransform(np.asarray(src, dtype=np.float32), np.asarray(dst, dtype=np.float32))


def perspective_warp(
    image: np.ndarray,
    corner_offsets: np.ndarray,
    jitter: Optional[float] = None,
) -> np.ndarray:
    """
    Warp so the image corners land on the jittered quad.

    Args:
        corner_offsets: 4x2 (dx, dy) displacements of TL, TR, BR, BL
        jitter: when given, offsets must not exceed jitter * min(H, W)

    Returns:
        Warped image of the same size, border pixels replicated.
    """
    image = as_image(image)
    offsets = np.asarray(corner_offsets, dtype=np.float64)
    if offsets.shape != (4, 2):
        raise ImageArgumentError(f"corner offsets must be 4x2, got {offsets.shape}")
    h, w = image.shape[:2]
    if jitter is not None and np.abs(offsets).max() > jitter * min(h, w) + 1e-9:
        raise ImageArgumentError(f"corner offset exceeds jitter bound {jitter} * {min(h, w)}")
    if not offsets.any():
        return image.copy()
    src = image_quad(h, w)
    matrix = homography(src, src + offsets)
    return cv2.warpPerspective(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    if angle_deg % 360.0 == 0.0:
        return image
    h, w = image.shape[:2]
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_deg, 1.0)
    return cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def scale_xy(image: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Anisotropic scale about the image centre, same output size."""
    if sx == 1.0 and sy == 1.0:
        return image
    h, w = image.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    matrix = np.array([[sx, 0.0, (1.0 - sx) * cx], [0.0, sy, (1.0 - sy) * cy]], dtype=np.float64)
    return cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def motion_blur(image: np.ndarray, length_px: float) -> np.ndarray:
    """Horizontal box blur of the given length; below 2 px the image is unchanged."""
    length = int(round(length_px))
    if length < 2:
        return image.copy()
    kernel = np.full((1, length), 1.0 / length, dtype=np.float32)
    return cv2.filter2D(image, -1, kernel, borderType=cv2.BORDER_REPLICATE)


# ============================================================================
# AUGMENTATION
# ============================================================================

def augment(image: np.ndarray, policy: AugmentationPolicy, rng_seed: int) -> np.ndarray:
    """
    Apply the policy in fixed order: flip, rotation, anisotropic scale,
    perspective warp, per-channel shift, global shift, intensity scale.

    All random draws happen up front in one order, so disabling a stage
    never changes the values drawn for the others.
    """
    image = as_image(image)
    h, w = image.shape[:2]
    rng = np.random.default_rng(rng_seed)
    flip = rng.random() < policy.flip_prob
    angle = rng.uniform(*policy.rotation_deg)
    sx = rng.uniform(*policy.scale_x)
    sy = rng.uniform(*policy.scale_y)
    offsets = rng.uniform(-1.0, 1.0, size=(4, 2)) * policy.perspective_jitter * min(h, w)
    channel = rng.uniform(*policy.channel_shift, size=3)
    shift = rng.uniform(*policy.pixel_shift)
    gain = rng.uniform(*policy.intensity_scale)

    out = image
    if flip:
        out = np.ascontiguousarray(out[:, ::-1])
    out = rotate(out, angle)
    out = scale_xy(out, sx, sy)
    if policy.perspective_jitter > 0.0:
        try:
            out = perspective_warp(out, offsets)
        except ImageArgumentError:
            logger.debug(f"Skipping degenerate perspective draw for seed {rng_seed}")

    if not channel.any() and shift == 0.0 and gain == 1.0:
        return out.copy() if out is image else out

    work = out.astype(np.float32)
    if channel.any():
        work = np.clip(work + channel.astype(np.float32)[None, None, :], 0.0, 255.0)
    if shift != 0.0:
        work = np.clip(work + np.float32(shift), 0.0, 255.0)
    if gain != 1.0:
        work = np.clip(work * np.float32(gain), 0.0, 255.0)
    return np.floor(work).astype(np.uint8)


def augment_batch(
    images: Sequence[np.ndarray],
    policy: AugmentationPolicy,
    seeds: Sequence[int],
    workers: int = 1,
) -> List[np.ndarray]:
    """Augment with one seed per sample; results do not depend on `workers`."""
    if len(images) != len(seeds):
        raise ValueError("one seed per image required")
    if workers <= 1:
        return [augment(im, policy, s) for im, s in zip(images, seeds)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda pair: augment(pair[0], policy, pair[1]), zip(images, seeds)))


def preview_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally sized rasters into one image, one list per row."""
    tiles = [[as_image(t) for t in row] for row in rows]
    h, w = tiles[0][0].shape[:2]
    ncols = max(len(r) for r in tiles)
    grid = np.full((len(tiles) * (h + pad) + pad, ncols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[y:y + h, x:x + w] = tile
    return grid
