"""
Procedural plant motifs and soil backgrounds.

The same renderer draws the synthetic training corpus and the field-simulator
frames, so a model trained on one transfers to the other. Each non-negative
class has its own shape family and hue; the negative class is background only.
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Tuple

import cv2
import numpy as np

from models import GenSource

logger = logging.getLogger(__name__)

NEGATIVE_CLASS_ID = 8
SOIL_RGB = np.array([112.0, 86.0, 62.0], dtype=np.float32)
ROW_RGB = (70, 110, 55)

Point = Tuple[float, float]
Primitive = Tuple[str, tuple]


# ============================================================================
# COLOURS
# ============================================================================

def _class_color(class_id: int) -> Tuple[int, int, int]:
    """Evenly spaced hue per class, alternating value to separate neighbours."""
    slot = class_id if class_id < NEGATIVE_CLASS_ID else class_id - 1
    hue = int(slot * 12) % 180
    value = 235 if slot % 2 == 0 else 175
    hsv = np.array([[[hue, 210, value]]], dtype=np.uint8)
    r, g, b = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0]
    return int(r), int(g), int(b)


MOTIF_COLORS: Dict[int, Tuple[int, int, int]] = {
    cid: _class_color(cid) for cid in range(16) if cid != NEGATIVE_CLASS_ID
}


# ============================================================================
# SHAPE FAMILIES (unit coordinates, radius 1)
# ============================================================================

def _star(rng: np.random.Generator) -> List[Primitive]:
    points = 8
    pts = []
    for k in range(points * 2):
        r = 1.0 if k % 2 == 0 else 0.35 + 0.05 * rng.random()
        a = math.pi * k / points
        pts.append((r * math.cos(a), r * math.sin(a)))
    return [("poly", tuple(pts))]


def _stripes(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(5):
        y = -0.8 + 0.4 * k + 0.05 * rng.standard_normal()
        prims.append(("line", ((-0.9, y), (0.9, y + 0.1), 0.06)))
    return prims


def _lobed_leaf(rng: np.random.Generator) -> List[Primitive]:
    pts = []
    for k in range(24):
        a = 2 * math.pi * k / 24
        r = (0.9 if k % 2 == 0 else 0.6) * (1.0 + 0.05 * rng.standard_normal())
        pts.append((r * math.cos(a) * 0.6, r * math.sin(a)))
    return [("poly", tuple(pts))]


def _fan(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(9):
        a = -math.pi * 0.9 + k * math.pi * 0.9 / 4 + 0.05 * rng.standard_normal()
        prims.append(("line", ((0.0, 0.6), (math.cos(a) * 0.9, 0.6 + math.sin(a) * 1.2), 0.07)))
    return prims


def _hatch(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(4):
        o = -0.6 + 0.4 * k
        prims.append(("line", ((o, -0.9), (o + 0.3, 0.9), 0.05)))
        prims.append(("line", ((-0.9, o), (0.9, o - 0.3), 0.05)))
    return prims


def _rosette(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(6):
        a = 2 * math.pi * k / 6 + 0.1 * rng.standard_normal()
        prims.append(("circle", ((0.6 * math.cos(a), 0.6 * math.sin(a)), 0.3)))
    prims.append(("circle", ((0.0, 0.0), 0.2)))
    return prims


def _flax(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(4):
        x = -0.6 + 0.4 * k + 0.05 * rng.standard_normal()
        prims.append(("line", ((x, 1.0), (x + 0.1, -0.8), 0.04)))
        prims.append(("circle", ((x + 0.1, -0.85), 0.14)))
    return prims


def _blobs(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for _ in range(5):
        c = tuple(rng.uniform(-0.6, 0.6, size=2))
        prims.append(("circle", (c, 0.25 + 0.1 * rng.random())))
    return prims


def _triangles(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(3):
        a = 2 * math.pi * k / 3 + 0.1 * rng.standard_normal()
        cx, cy = 0.5 * math.cos(a), 0.5 * math.sin(a)
        pts = tuple((cx + 0.45 * math.cos(a + j * 2 * math.pi / 3), cy + 0.45 * math.sin(a + j * 2 * math.pi / 3))
                    for j in range(3))
        prims.append(("poly", pts))
    return prims


def _broad_leaves(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for k in range(5):
        a = 2 * math.pi * k / 5 + 0.1 * rng.standard_normal()
        prims.append(("ellipse", ((0.5 * math.cos(a), 0.5 * math.sin(a)), (0.5, 0.2), math.degrees(a))))
    return prims


def _waves(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    phase = rng.uniform(0, math.pi)
    for k in range(3):
        y0 = -0.6 + 0.6 * k
        pts = tuple((x, y0 + 0.2 * math.sin(4 * x + phase)) for x in np.linspace(-0.9, 0.9, 16))
        prims.append(("polyline", (pts, 0.06)))
    return prims


def _rings(rng: np.random.Generator) -> List[Primitive]:
    return [("ring", ((0.0, 0.0), r, 0.08)) for r in (0.9, 0.6, 0.3)]


def _notched_leaf(rng: np.random.Generator) -> List[Primitive]:
    pts = []
    for k in range(32):
        a = 2 * math.pi * k / 32
        r = 0.9 if abs(math.sin(a / 2)) > 0.2 else 0.45
        pts.append((r * math.cos(a), r * math.sin(a)))
    return [("poly", tuple(pts))]


def _dots(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for gx in range(-2, 3):
        for gy in range(-2, 3):
            if gx * gx + gy * gy <= 5:
                c = (0.35 * gx + 0.03 * rng.standard_normal(), 0.35 * gy + 0.03 * rng.standard_normal())
                prims.append(("circle", (c, 0.1)))
    return prims


def _checker(rng: np.random.Generator) -> List[Primitive]:
    prims = []
    for gx in range(-2, 2):
        for gy in range(-2, 2):
            if (gx + gy) % 2 == 0:
                x0, y0 = 0.45 * gx, 0.45 * gy
                prims.append(("poly", ((x0, y0), (x0 + 0.45, y0), (x0 + 0.45, y0 + 0.45), (x0, y0 + 0.45))))
    return prims


SHAPES: Dict[int, Callable[[np.random.Generator], List[Primitive]]] = {
    0: _star, 1: _stripes, 2: _lobed_leaf, 3: _fan, 4: _hatch, 5: _rosette,
    6: _flax, 7: _blobs, 9: _triangles, 10: _broad_leaves, 11: _waves,
    12: _rings, 13: _notched_leaf, 14: _dots, 15: _checker,
}


# ============================================================================
# DRAWING
# ============================================================================

def _transform(points, center: Point, radius: float, angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    pts = np.asarray(points, dtype=np.float64) @ rot.T * radius + np.asarray(center)
    return np.round(pts).astype(np.int32)


def draw_motif(
    image: np.ndarray,
    mask: np.ndarray,
    class_id: int,
    center: Point,
    radius_px: float,
    angle_deg: float,
    rng: np.random.Generator,
) -> None:
    """Draw the class motif into `image` (RGB) and `mask` in place."""
    if class_id not in SHAPES:
        return
    base = np.array(MOTIF_COLORS[class_id], dtype=np.float64)
    for kind, args in SHAPES[class_id](rng):
        shade = np.clip(base * (1.0 + 0.06 * rng.standard_normal()), 0, 255)
        color = tuple(int(c) for c in shade)
        if kind == "poly":
            pts = _transform(args, center, radius_px, angle_deg)
            cv2.fillPoly(image, [pts], color)
            cv2.fillPoly(mask, [pts], 255)
        elif kind == "line":
            p0, p1, width = args
            pts = _transform([p0, p1], center, radius_px, angle_deg)
            thick = max(1, int(round(width * radius_px)))
            cv2.line(image, tuple(pts[0]), tuple(pts[1]), color, thick)
            cv2.line(mask, tuple(pts[0]), tuple(pts[1]), 255, thick)
        elif kind == "polyline":
            pts_unit, width = args
            pts = _transform(pts_unit, center, radius_px, angle_deg)
            thick = max(1, int(round(width * radius_px)))
            cv2.polylines(image, [pts], False, color, thick)
            cv2.polylines(mask, [pts], False, 255, thick)
        elif kind in ("circle", "ring"):
            c = _transform([args[0]], center, radius_px, angle_deg)[0]
            r = max(1, int(round(args[1] * radius_px)))
            thick = -1 if kind == "circle" else max(1, int(round(args[2] * radius_px)))
            cv2.circle(image, tuple(c), r, color, thick)
            cv2.circle(mask, tuple(c), r, 255, thick)
        elif kind == "ellipse":
            (cx, cy), (ax, ay), rot = args
            c = _transform([(cx, cy)], center, radius_px, angle_deg)[0]
            axes = (max(1, int(ax * radius_px)), max(1, int(ay * radius_px)))
            cv2.ellipse(image, tuple(c), axes, rot + angle_deg, 0, 360, color, -1)
            cv2.ellipse(mask, tuple(c), axes, rot + angle_deg, 0, 360, 255, -1)


def soil_background(
    height: int,
    width: int,
    rng: np.random.Generator,
    clutter: bool = False,
    row_offsets: Optional[List[float]] = None,
) -> np.ndarray:
    """
    Noisy soil texture, optionally with low-contrast crop-row lines.

    Args:
        row_offsets: vertical positions of crop rows as fractions of height;
            random rows are drawn when clutter is set and none are given.
    """
    coarse = rng.standard_normal((height // 8 + 2, width // 8 + 2)).astype(np.float32)
    coarse = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_LINEAR)
    fine = rng.standard_normal((height, width, 3)).astype(np.float32)
    img = SOIL_RGB[None, None, :] + 16.0 * coarse[:, :, None] + 6.0 * fine
    if clutter or row_offsets:
        layer = np.zeros((height, width, 3), dtype=np.uint8)
        offsets = row_offsets if row_offsets else list(rng.uniform(0.1, 0.9, size=2))
        thick = max(1, height // 40)
        for frac in offsets:
            y = int(round(frac * (height - 1)))
            cv2.line(layer, (0, y), (width - 1, y), ROW_RGB, thick)
        hit = layer.any(axis=2)
        img[hit] = 0.7 * img[hit] + 0.3 * layer[hit].astype(np.float32)
    return np.clip(img, 0, 255).astype(np.uint8)


def apply_lighting(
    image: np.ndarray,
    brightness: float = 1.0,
    shadow: float = 0.0,
    shadow_angle_deg: float = 0.0,
    blur_sigma: float = 0.0,
) -> np.ndarray:
    """Brightness gain, linear shadow ramp and Gaussian blur, clamped to u8."""
    if brightness == 1.0 and shadow == 0.0 and blur_sigma == 0.0:
        return image.copy()
    h, w = image.shape[:2]
    out = image.astype(np.float32) * brightness
    if shadow > 0.0:
        a = math.radians(shadow_angle_deg)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        proj = (xs / max(w - 1, 1) - 0.5) * math.cos(a) + (ys / max(h - 1, 1) - 0.5) * math.sin(a)
        ramp = 1.0 - shadow * np.clip(proj + 0.5, 0.0, 1.0)
        out *= ramp[:, :, None]
    out = np.clip(out, 0, 255).astype(np.uint8)
    if blur_sigma > 0.0:
        out = cv2.GaussianBlur(out, (0, 0), blur_sigma, borderType=cv2.BORDER_REPLICATE)
    return out


def render_sample(
    gen: GenSource,
    negative_class_id: int = NEGATIVE_CLASS_ID,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render one synthetic sample from its generator record.

    Returns:
        (image, mask): RGB uint8 raster and the foreground mask (all zero for
        the negative class).
    """
    rng = np.random.default_rng(gen.seed)
    image = soil_background(gen.height, gen.width, rng, clutter=gen.clutter)
    mask = np.zeros((gen.height, gen.width), dtype=np.uint8)
    if gen.class_id != negative_class_id:
        radius = 0.4 * min(gen.height, gen.width) * gen.scale
        center = (gen.width / 2 + gen.offset_x * gen.width, gen.height / 2 + gen.offset_y * gen.height)
        draw_motif(image, mask, gen.class_id, center, radius, gen.rotation_deg, rng)
    image = apply_lighting(image, gen.brightness, gen.shadow, gen.shadow_angle_deg, gen.blur_sigma)
    return image, mask
