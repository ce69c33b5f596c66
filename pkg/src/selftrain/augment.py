"""Input noise: augmentation ops, a RandAugment-style policy, and standard augmentation.

Images are H x W x C arrays in [0, 1]; batch functions take N x H x W x C.
Geometric ops resample bilinearly (via the compiled warp kernel) and fill
exposed pixels with mid-gray 0.5.

Physical magnitudes passed to :func:`apply_op`:

==================  ==========================================  ============
kind                magnitude                                   at level 30
==================  ==========================================  ============
translate-x / -y    pixels (positive moves content right/down)  0.3 * side
shear-x / -y        shear coefficient                           0.3
rotate              degrees, counter-clockwise                  30
brightness          factor - 1                                  0.9
contrast            factor - 1                                  0.9
sharpness           factor - 1                                  0.9
cutout              square side as a fraction of image side     0.4
flip-horizontal     ignored
invert              ignored
==================  ==========================================  ============
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .config import AUGMENT_KINDS, NoiseConfig, RandAugmentPolicy
from .errors import ConfigError

FILL = 0.5
MAX_LEVEL = 30

MAX_MAGNITUDE = {
    "translate-x": 0.3,
    "translate-y": 0.3,
    "shear-x": 0.3,
    "shear-y": 0.3,
    "rotate": 30.0,
    "brightness": 0.9,
    "contrast": 0.9,
    "sharpness": 0.9,
    "cutout": 0.4,
    "flip-horizontal": 0.0,
    "invert": 0.0,
}
SIGNED = {"translate-x", "translate-y", "shear-x", "shear-y", "rotate", "brightness", "contrast", "sharpness"}
GEOMETRIC = ("translate-x", "translate-y", "shear-x", "shear-y", "rotate")


def _snap(v):
    return 0.0 if abs(v) < 1e-12 else v


def affine_coeffs(kind, magnitude, height, width):
    """Warp coefficients (output pixel -> source pixel) for one geometric op."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    m = float(magnitude)
    if kind == "translate-x":
        return (1.0, 0.0, 0.0, 0.0, 1.0, -m)
    if kind == "translate-y":
        return (1.0, 0.0, -m, 0.0, 1.0, 0.0)
    if kind == "shear-x":
        return (1.0, 0.0, 0.0, m, 1.0, -m * cy)
    if kind == "shear-y":
        return (1.0, m, -m * cx, 0.0, 1.0, 0.0)
    if kind == "rotate":
        t = math.radians(m)
        c, s = _snap(math.cos(t)), _snap(math.sin(t))
        return (c, s, cy - c * cy - s * cx, -s, c, cx + s * cy - c * cx)
    raise ConfigError(f"{kind!r} is not a geometric op")


def _warp(images, kind, mags):
    _, H, W, _ = images.shape
    coeffs = np.array([affine_coeffs(kind, m, H, W) for m in mags], dtype=np.float64)
    return kernels.affine_warp(np.ascontiguousarray(images), coeffs, FILL)


def _smooth3x3(images):
    # 3x3 kernel with centre weight 5, others 1 (sum 13); border pixels untouched
    out = images.copy()
    acc = 4.0 * images[:, 1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            acc = acc + images[:, 1 + dy : images.shape[1] - 1 + dy, 1 + dx : images.shape[2] - 1 + dx]
    out[:, 1:-1, 1:-1] = acc / 13.0
    return out


def _apply_batch(images, kind, mags, aux):
    """Apply ``kind`` to each image with its own magnitude; ``aux`` is N x 2 uniforms."""
    if kind in GEOMETRIC:
        return _warp(images, kind, mags)
    mags = np.asarray(mags, dtype=np.float64).reshape(-1, 1, 1, 1)
    if kind == "flip-horizontal":
        return images[:, :, ::-1].copy()
    if kind == "invert":
        return 1.0 - images
    if kind == "brightness":
        return np.clip(images * (1.0 + mags), 0.0, 1.0)
    if kind == "contrast":
        mean = images.mean(axis=(1, 2, 3), keepdims=True)
        return np.clip(mean + (1.0 + mags) * (images - mean), 0.0, 1.0)
    if kind == "sharpness":
        blurred = _smooth3x3(images)
        return np.clip(blurred + (1.0 + mags) * (images - blurred), 0.0, 1.0)
    if kind == "cutout":
        out = images.copy()
        _, H, W, _ = images.shape
        for i, (m, (u, v)) in enumerate(zip(mags.ravel(), aux)):
            side = int(round(abs(m) * min(H, W)))
            if side == 0:
                continue
            cy, cx = int(u * H), int(v * W)
            y0, x0 = max(0, cy - side // 2), max(0, cx - side // 2)
            out[i, y0 : min(H, y0 + side), x0 : min(W, x0 + side)] = FILL
        return out
    raise ConfigError(f"unknown augmentation op {kind!r}")


def apply_op(image, kind, magnitude, rng=None):
    """Apply one op to a single H x W x C image at a physical ``magnitude``.

    ``rng`` is only consulted by ``cutout`` (square position).
    """
    if kind not in AUGMENT_KINDS:
        raise ConfigError(f"unknown augmentation op {kind!r}")
    aux = rng.random((1, 2)) if rng is not None else np.full((1, 2), 0.5)
    return _apply_batch(np.asarray(image, dtype=np.float64)[None], kind, [magnitude], aux)[0]


def physical_magnitude(kind, level, side):
    """Map a 0..30 level to the op's physical unit (unsigned)."""
    m = MAX_MAGNITUDE[kind] * level / MAX_LEVEL
    return m * side if kind in ("translate-x", "translate-y") else m


def randaugment_batch(images, policy: RandAugmentPolicy, rng):
    """Per image, apply ``num_ops`` ops drawn uniformly (with replacement) from the menu.

    Signed ops get a random sign. All random draws happen up front in fixed
    shapes, so the result depends only on (images, policy, rng state).
    """
    images = np.asarray(images, dtype=np.float64)
    n, H, W, _ = images.shape
    menu = list(policy.op_menu)
    ops = rng.integers(len(menu), size=(n, policy.num_ops))
    signs = np.where(rng.random((n, policy.num_ops)) < 0.5, -1.0, 1.0)
    aux = rng.random((n, policy.num_ops, 2))
    out = images.copy()
    for j in range(policy.num_ops):
        for k, kind in enumerate(menu):
            sel = np.flatnonzero(ops[:, j] == k)
            if sel.size == 0:
                continue
            base = physical_magnitude(kind, policy.magnitude, min(H, W))
            mags = base * (signs[sel, j] if kind in SIGNED else np.ones(sel.size))
            out[sel] = _apply_batch(out[sel], kind, mags, aux[sel, j])
    return out


def randaugment(image, policy: RandAugmentPolicy, rng):
    return randaugment_batch(np.asarray(image)[None], policy, rng)[0]


def translate_flip(images, dy, dx, flip):
    """Integer shift (content moves by ``(dy, dx)``) then optional horizontal flip, per image."""
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    dy, dx = np.broadcast_to(dy, n), np.broadcast_to(dx, n)
    coeffs = np.array([(1.0, 0.0, -float(a), 0.0, 1.0, -float(b)) for a, b in zip(dy, dx)])
    out = kernels.affine_warp(np.ascontiguousarray(images), coeffs, FILL)
    flip = np.broadcast_to(flip, n)
    out[flip] = out[flip][:, :, ::-1]
    return out


def standard_augment_batch(images, rng):
    """Random translation up to 10% of the side, then a horizontal flip with p = 0.5."""
    images = np.asarray(images, dtype=np.float64)
    n, H, W, _ = images.shape
    sy, sx = int(0.1 * H), int(0.1 * W)
    dy = rng.integers(-sy, sy + 1, size=n)
    dx = rng.integers(-sx, sx + 1, size=n)
    flip = rng.random(n) < 0.5
    return translate_flip(images, dy, dx, flip)


def standard_augment(image, rng):
    return standard_augment_batch(np.asarray(image)[None], rng)[0]


def augment_batch(images, noise: NoiseConfig, rng):
    """Input noise for a training batch as configured (identity when disabled)."""
    if not noise.enable_aug:
        return np.asarray(images, dtype=np.float64)
    if noise.augment_policy == "standard":
        return standard_augment_batch(images, rng)
    return randaugment_batch(images, noise.augment_policy, rng)
