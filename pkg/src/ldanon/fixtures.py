"""Synthetic images understood by the toy adapters.

Faces are rectangles whose green channel sits below 16 while red and blue stay
above 128; backgrounds keep green at 40 or more so they are never detected.
"""
from __future__ import annotations

import numpy as np


def _background(rng, size):
    H, W = size
    base = rng.uniform(40, 215, size=3)
    yy, xx = np.mgrid[0:H, 0:W]
    ramp = np.stack([np.sin(xx / W * np.pi * rng.uniform(1, 3)),
                     np.cos(yy / H * np.pi * rng.uniform(1, 3)),
                     np.sin((xx + yy) / (H + W) * np.pi * 2)], axis=-1)
    img = base + 35 * ramp + rng.normal(0, 4, size=(H, W, 3))
    img[..., 1] = np.clip(img[..., 1], 40, 255)
    return np.clip(img, 0, 255)


def draw_face(img, bbox, rng):
    x0, y0, x1, y1 = bbox
    h, w = y1 - y0, x1 - x0
    img[y0:y1, x0:x1, 0] = rng.integers(140, 256, size=(h, w))
    img[y0:y1, x0:x1, 1] = rng.integers(0, 16, size=(h, w))
    img[y0:y1, x0:x1, 2] = rng.integers(140, 256, size=(h, w))
    return img


def face_boxes(name, size):
    H, W = size
    if name == "blank" or name == "background":
        return []
    if name == "one_face":
        return [(W // 4, H // 4, 3 * W // 4, 3 * H // 4)]
    if name == "two_faces":
        # left face larger than right face
        return [(W // 16, H // 8, W // 16 + 3 * W // 8, H // 8 + H // 2),
                (5 * W // 8, H // 2, 5 * W // 8 + W // 4, H // 2 + W // 4)]
    raise KeyError(name)


def make_fixture(name: str, size=(64, 64), seed: int = 0) -> np.ndarray:
    """Named fixture as a uint8 ``(H, W, 3)`` array.

    ``blank`` is flat grey; ``background`` is texture without faces;
    ``one_face`` and ``two_faces`` add face rectangles; ``scene`` places 0-3
    random non-overlapping faces.
    """
    rng = np.random.default_rng([seed, len(name)])
    H, W = size
    if name == "blank":
        return np.full((H, W, 3), 128, dtype=np.uint8)
    img = _background(rng, size)
    if name == "scene":
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            for _attempt in range(20):
                bw = int(rng.integers(W // 8, W // 3))
                bh = int(rng.integers(H // 8, H // 3))
                x0 = int(rng.integers(0, W - bw))
                y0 = int(rng.integers(0, H - bh))
                box = (x0, y0, x0 + bw, y0 + bh)
                # keep a one-pixel gap so boxes never merge into one component
                if all(box[2] + 1 < b[0] or b[2] + 1 < box[0] or box[3] + 1 < b[1] or b[3] + 1 < box[1]
                       for b in boxes):
                    boxes.append(box)
                    break
    else:
        boxes = face_boxes(name, size)
    for box in boxes:
        draw_face(img, box, rng)
    return np.round(img).astype(np.uint8)
