"""Procedural scene content: the root stop-sign texture, backgrounds, distractors."""
from __future__ import annotations

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .registration import TextureMap, polygon_interior

SIGN_RED = (0.78, 0.07, 0.09)
WHITE = (1.0, 1.0, 1.0)


def octagon_vertices(size: int = 128, margin: float = 4.0) -> np.ndarray:
    """Eight vertices of a flat-topped regular octagon centered in a ``size`` texture."""
    c = (size - 1) / 2.0
    r = (size - 1) / 2.0 - margin
    # circumradius of the octagon whose inscribed circle has radius r
    R = r / np.cos(np.pi / 8)
    ang = np.pi / 8 + np.arange(8) * np.pi / 4
    return np.stack([c + R * np.cos(ang), c + R * np.sin(ang)], axis=1)


def _fill(img: np.ndarray, poly: np.ndarray, color, shift: int = 4):
    pts = np.round(poly * (1 << shift)).astype(np.int32)
    cv2.fillPoly(img, [pts], color, lineType=cv2.LINE_AA, shift=shift)


def stop_sign_texture(size: int = 128) -> TextureMap:
    """Red octagon with a white rim and white lettering.

    Texels outside the octagon carry the rim color so bilinear samples at
    the object's edge do not pull in black.
    """
    verts = octagon_vertices(size)
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    c = (size - 1) / 2.0
    inner = c + (verts - c) * 0.88
    _fill(img, inner, tuple(int(round(255 * v)) for v in SIGN_RED))
    scale = size / 128.0
    text = "STOP"
    font = cv2.FONT_HERSHEY_SIMPLEX
    thick = max(1, int(round(3 * scale)))
    (tw, th), _ = cv2.getTextSize(text, font, 1.05 * scale, thick)
    org = (int(round(c - tw / 2)), int(round(c + th / 2)))
    cv2.putText(img, text, org, font, 1.05 * scale, (255, 255, 255), thick, cv2.LINE_AA)
    img = img.astype(np.float64) / 255.0
    mask = polygon_interior(verts, (size, size)) | _vertex_hull_mask(verts, size)
    return TextureMap(np.clip(img, 0, 1), mask)


def _vertex_hull_mask(verts: np.ndarray, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=np.uint8)
    cv2.fillPoly(m, [np.round(verts).astype(np.int32)], 1)
    return m.astype(bool)


def smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def tree_background(rng: np.random.Generator, width: int = 320, height: int = 240) -> np.ndarray:
    """Cluttered, low-contrast foliage."""
    base = np.array([0.22, 0.32, 0.16]) * rng.uniform(0.8, 1.2, size=3)
    img = np.broadcast_to(base, (height, width, 3)).copy()
    for sigma, amp in ((14, 0.08), (5, 0.06), (1.5, 0.04)):
        n = smooth_noise(rng, (height, width), sigma)
        tint = rng.uniform(0.6, 1.4, size=3)
        img += amp * n[..., None] * tint
    for _ in range(rng.integers(6, 14)):
        p0 = rng.uniform([0, 0], [width, height])
        p1 = p0 + rng.normal(0, 60, size=2)
        col = tuple(float(v) for v in np.array([0.25, 0.18, 0.1]) * rng.uniform(0.6, 1.3))
        cv2.line(img, tuple(int(v) for v in p0), tuple(int(v) for v in p1), col,
                 int(rng.integers(1, 4)), cv2.LINE_AA)
    return np.clip(img, 0, 1)


def sky_background(rng: np.random.Generator, width: int = 320, height: int = 240) -> np.ndarray:
    """Plain, bright sky gradient with faint clouds."""
    top = np.array([0.45, 0.62, 0.9]) * rng.uniform(0.85, 1.1, size=3)
    bottom = np.array([0.8, 0.87, 0.95]) * rng.uniform(0.9, 1.05, size=3)
    t = np.linspace(0, 1, height)[:, None, None]
    img = top * (1 - t) + bottom * t
    img = np.broadcast_to(img, (height, width, 3)).copy()
    clouds = np.clip(smooth_noise(rng, (height, width), 20), 0, None)
    img += 0.06 * clouds[..., None]
    return np.clip(img, 0, 1)


BACKGROUNDS = {"tree": tree_background, "sky": sky_background}


def background_pool(rng: np.random.Generator, per_condition: int, width: int = 320,
                    height: int = 240) -> list[tuple[str, np.ndarray]]:
    pool = []
    for cond, fn in BACKGROUNDS.items():
        pool += [(cond, fn(rng, width, height)) for _ in range(per_condition)]
    return pool


def draw_distractor(img: np.ndarray, rng: np.random.Generator, kind: str, center, size: float) -> np.ndarray:
    """Draw a kite (diamond) or disc in place; returns the object's polygon."""
    color = tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3))
    cx, cy = center
    if kind == "kite":
        ang = rng.uniform(-0.3, 0.3)
        pts = np.array([[0, -1.0], [0.7, -0.1], [0, 1.0], [-0.7, -0.1]]) * size / 2
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        poly = pts @ rot.T + [cx, cy]
        _fill(img, poly, color)
        accent = tuple(float(v) for v in rng.uniform(0, 1, size=3))
        cv2.line(img, tuple(int(v) for v in poly[0]), tuple(int(v) for v in poly[2]), accent, 1, cv2.LINE_AA)
        return poly
    if kind == "disc":
        ang = np.linspace(0, 2 * np.pi, 32, endpoint=False)
        poly = np.stack([cx + size / 2 * np.cos(ang), cy + size / 2 * np.sin(ang)], axis=1)
        _fill(img, poly, color)
        return poly
    raise ValueError(f"unknown distractor {kind!r}")
