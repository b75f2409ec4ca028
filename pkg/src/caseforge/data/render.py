"""Procedural person sprites.

A sprite is a 2-D stick-and-box figure whose silhouette is controlled by
:class:`ShapeParams` (the identity) and whose clothing colors come from an
:class:`Outfit` (the nuisance). Pose swings the limbs, view mirrors and
rescales the figure.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# (low, high) in units of image height
SHAPE_BOUNDS = {
    "height_scale": (0.70, 0.92),
    "torso_width": (0.10, 0.20),
    "limb_thickness": (0.025, 0.055),
    "head_radius": (0.045, 0.075),
    "shoulder_offset": (0.0, 0.04),
}

SKIN = (0.85, 0.65, 0.50)
TOP_LUMA = 0.55
BOTTOM_LUMA = 0.40
SUPERSAMPLE = 4


def to_grayscale(image):
    """Luma-weighted gray image with the single channel copied back to three.

    Works on numpy arrays and torch tensors of shape ``(..., 3)``.
    """
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    # same weighted sum, arranged so that equal channels come back exactly
    luma = g + GRAY_WEIGHTS[0] * (r - g) + GRAY_WEIGHTS[2] * (b - g)
    if isinstance(image, np.ndarray):
        return np.repeat(luma[..., None], 3, axis=-1).clip(0.0, 1.0)
    return luma.unsqueeze(-1).expand(*luma.shape, 3).clamp(0.0, 1.0).contiguous()


@dataclass(frozen=True)
class ShapeParams:
    height_scale: float
    torso_width: float
    limb_thickness: float
    head_radius: float
    shoulder_offset: float

    @classmethod
    def from_unit(cls, u) -> "ShapeParams":
        """Map a point of the unit cube onto the documented bounds."""
        vals = {}
        for f, t in zip(fields(cls), u):
            lo, hi = SHAPE_BOUNDS[f.name]
            vals[f.name] = float(lo + (hi - lo) * t)
        return cls(**vals)

    def to_unit(self) -> np.ndarray:
        out = []
        for f in fields(self):
            lo, hi = SHAPE_BOUNDS[f.name]
            out.append((getattr(self, f.name) - lo) / (hi - lo))
        return np.array(out)

    def as_dict(self) -> dict:
        return asdict(self)


def shape_grid_levels(delta: float) -> int:
    """Number of levels per parameter so neighbouring levels are >= delta apart."""
    if not 0 < delta <= 1:
        raise ValueError(f"delta_shape must be in (0, 1], got {delta}")
    return int(math.floor(1.0 / delta + 1e-9)) + 1


def chroma_color(hue: float, luma: float, amplitude: float = 0.4) -> tuple:
    """RGB color of the given hue whose BT.601 luma is exactly ``luma``."""
    w = np.array(GRAY_WEIGHTS)
    u = np.array([math.cos(hue), math.cos(hue - 2 * math.pi / 3), math.cos(hue + 2 * math.pi / 3)])
    u = u - (w @ u)
    u = u / np.abs(u).max()
    rgb = luma + amplitude * u
    return tuple(float(c) for c in np.clip(rgb, 0.0, 1.0))


@dataclass(frozen=True)
class Outfit:
    top: tuple
    bottom: tuple
    stripe: tuple | None = None

    def as_dict(self) -> dict:
        return {"top": list(self.top), "bottom": list(self.bottom),
                "stripe": None if self.stripe is None else list(self.stripe)}

    @classmethod
    def from_dict(cls, d) -> "Outfit":
        return cls(tuple(d["top"]), tuple(d["bottom"]),
                   None if d.get("stripe") is None else tuple(d["stripe"]))


def make_outfits(n_hues: int, stripe_prob: float, luma_jitter: float, rng) -> list:
    """All (top hue, bottom hue) pairs of an ``n_hues`` palette, in a fixed order.

    Every top shares one luma band and every bottom another, so the
    grayscale image barely changes when only the hue changes.
    """
    offset = rng.uniform(0, 2 * math.pi)
    hues = [offset + 2 * math.pi * k / n_hues for k in range(n_hues)]
    outfits = []
    for i in range(n_hues):
        for j in range(n_hues):
            top_l = TOP_LUMA + rng.uniform(-luma_jitter, luma_jitter)
            bot_l = BOTTOM_LUMA + rng.uniform(-luma_jitter, luma_jitter)
            stripe = None
            if rng.uniform() < stripe_prob:
                k = (i + 1 + int(rng.integers(n_hues - 1))) % n_hues if n_hues > 1 else i
                stripe = chroma_color(hues[k], top_l)
            outfits.append(Outfit(chroma_color(hues[i], top_l), chroma_color(hues[j], bot_l), stripe))
    return outfits


def _capsule(x, y, p0, p1, radius):
    px, py = x - p0[0], y - p0[1]
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    denom = dx * dx + dy * dy
    t = np.clip((px * dx + py * dy) / denom, 0.0, 1.0) if denom > 0 else 0.0
    qx, qy = px - t * dx, py - t * dy
    return qx * qx + qy * qy <= radius * radius


def _limb(origin, length, angle):
    return origin, (origin[0] + length * math.sin(angle), origin[1] + length * math.cos(angle))


def render_person(shape: ShapeParams, outfit: Outfit, pose_id: int, n_poses: int,
                  view_id: int, height: int, width: int, rng, noise_amplitude: float = 0.03):
    """Rasterize one sprite to an ``(height, width, 3)`` float32 image in [0, 1]."""
    ss = SUPERSAMPLE
    hs, ws = height * ss, width * ss
    aspect = width / height
    ys = (np.arange(hs) + 0.5) / hs
    xs = (np.arange(ws) + 0.5) / hs
    x, y = np.meshgrid(xs, ys)

    # view: mirror and rescale about the feet
    cx, ground = aspect / 2, 0.96
    scale = 1.0 - 0.06 * (view_id // 2)
    if view_id % 2:
        x = 2 * cx - x
    x = cx + (x - cx) / scale
    y = ground + (y - ground) / scale

    h = shape.height_scale
    r = shape.head_radius
    lt = shape.limb_thickness
    tw = shape.torso_width
    top = ground - h
    head_c = (cx, top + r)
    torso_top = top + 2 * r + 0.01
    leg_len = 0.47 * h
    hip = ground - leg_len
    arm_len = 0.38 * h

    phase = 2 * math.pi * pose_id / max(n_poses, 1)
    arm_swing = 0.45 * math.sin(phase)
    arm_spread = 0.12 * (1.0 - math.cos(phase))
    leg_swing = 0.35 * math.sin(phase)
    shoulder_dx = tw / 2 + shape.shoulder_offset - lt / 2
    shoulder_y = torso_top + lt / 2

    canvas = np.zeros((hs, ws, 3), dtype=np.float64)
    mask_any = np.zeros((hs, ws), dtype=bool)

    def paint(mask, color):
        canvas[mask] = color
        mask_any[mask] = True

    leg_l = _limb((cx - tw / 4, hip), leg_len - lt / 2, -leg_swing)
    leg_r = _limb((cx + tw / 4, hip), leg_len - lt / 2, leg_swing)
    arm_l = _limb((cx - shoulder_dx, shoulder_y), arm_len, arm_swing - arm_spread)
    arm_r = _limb((cx + shoulder_dx, shoulder_y), arm_len, -arm_swing + arm_spread)

    paint(_capsule(x, y, *arm_r, lt / 2), outfit.top)
    paint(_capsule(x, y, *leg_l, lt / 2 * 1.15), outfit.bottom)
    paint(_capsule(x, y, *leg_r, lt / 2 * 1.15), outfit.bottom)
    torso = (np.abs(x - cx) <= tw / 2) & (y >= torso_top) & (y <= hip + 0.01)
    paint(torso, outfit.top)
    if outfit.stripe is not None:
        stripes = torso & (np.floor((y - torso_top) / 0.03) % 2 == 1)
        paint(stripes, outfit.stripe)
    paint(_capsule(x, y, *arm_l, lt / 2), outfit.top)
    neck = (np.abs(x - cx) <= lt / 2) & (y >= head_c[1]) & (y <= torso_top)
    paint(neck, SKIN)
    paint((x - head_c[0]) ** 2 + (y - head_c[1]) ** 2 <= r * r, SKIN)

    fg = canvas.reshape(height, ss, width, ss, 3).mean(axis=(1, 3))
    cover = mask_any.reshape(height, ss, width, ss).mean(axis=(1, 3))[..., None]

    bg_level = 0.12 + 0.04 * (view_id % 3)
    bg = bg_level + noise_amplitude * rng.standard_normal((height, width, 1))
    bg = np.repeat(bg, 3, axis=-1)
    # fg already carries coverage-weighted color, so blend background by (1 - coverage)
    img = fg + (1.0 - cover) * bg
    return np.clip(img, 0.0, 1.0).astype(np.float32)
