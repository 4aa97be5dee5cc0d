"""Per-face attribute records and their 41-channel spatial encoding.

Channels 0..39 carry a face's 40 attribute values over its box footprint;
channel 40 marks the four keypoints (eyes, nose, mouth) with 1.0.
"""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractViolation

log = logging.getLogger(__name__)

N_ATTRIBUTES = 40
N_CHANNELS = N_ATTRIBUTES + 1
KEYPOINT_CHANNEL = N_ATTRIBUTES
KEYPOINT_NAMES = ("left_eye", "right_eye", "nose", "mouth")
EMBED_DIM = 512


@dataclass(frozen=True, eq=False)
class FaceRecord:
    bbox: tuple
    keypoints: dict
    attributes: np.ndarray = field(repr=False)
    identity_embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (x0 < x1 and y0 < y1):
            raise ContractViolation(f"degenerate bbox {self.bbox}")
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))
        if set(self.keypoints) != set(KEYPOINT_NAMES):
            raise ContractViolation(f"keypoints must be exactly {KEYPOINT_NAMES}")
        object.__setattr__(self, "keypoints",
                           {k: (float(self.keypoints[k][0]), float(self.keypoints[k][1])) for k in KEYPOINT_NAMES})
        attrs = np.array(self.attributes, dtype=np.float64)
        if attrs.shape != (N_ATTRIBUTES,):
            raise ContractViolation(f"expected {N_ATTRIBUTES} attributes, got shape {attrs.shape}")
        if np.any(attrs < 0) or np.any(attrs > 1):
            raise ContractViolation("attribute values must lie in [0, 1]")
        emb = np.array(self.identity_embedding, dtype=np.float64)
        norm = np.linalg.norm(emb) if emb.ndim == 1 else 0.0
        if emb.shape != (EMBED_DIM,) or not (0 < norm < np.inf):
            raise ContractViolation(f"identity embedding must be a nonzero finite {EMBED_DIM}-vector")
        attrs.setflags(write=False)
        emb.setflags(write=False)
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "identity_embedding", emb)

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    def check_bounds(self, image_size):
        H, W = image_size
        x0, y0, x1, y1 = self.bbox
        if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
            raise ContractViolation(f"bbox {self.bbox} outside image {W}x{H}")


def footprint(bbox, image_size, map_size):
    """Map-cell ranges ``(r0, r1, c0, c1)`` (half-open) covered by a pixel bbox."""
    H, W = image_size
    h, w = map_size
    x0, y0, x1, y1 = bbox
    r0 = min(math.floor(y0 * h / H), h - 1)
    c0 = min(math.floor(x0 * w / W), w - 1)
    r1 = max(math.ceil(y1 * h / H), r0 + 1)
    c1 = max(math.ceil(x1 * w / W), c0 + 1)
    return r0, min(r1, h), c0, min(c1, w)


def keypoint_cell(point, image_size, map_size):
    H, W = image_size
    h, w = map_size
    x, y = point
    return min(max(math.floor(y * h / H), 0), h - 1), min(max(math.floor(x * w / W), 0), w - 1)


def encode_attribute_map(faces, image_size, map_size) -> np.ndarray:
    """Rasterise faces into a ``(41, h, w)`` map; later faces overwrite earlier ones."""
    h, w = map_size
    out = np.zeros((N_CHANNELS, h, w))
    for face in faces:
        face.check_bounds(image_size)
        r0, r1, c0, c1 = footprint(face.bbox, image_size, map_size)
        out[:N_ATTRIBUTES, r0:r1, c0:c1] = face.attributes[:, None, None]
    for face in faces:
        for name in KEYPOINT_NAMES:
            r, c = keypoint_cell(face.keypoints[name], image_size, map_size)
            out[KEYPOINT_CHANNEL, r, c] = 1.0
    return out


# toy detection: faces are drawn as rectangles with green below FACE_GREEN_MAX and
# red and blue above FACE_RB_MIN; anything else is background
FACE_GREEN_MAX = 16
FACE_RB_MIN = 128
KEYPOINT_LAYOUT = {
    "left_eye": (0.3, 0.35),
    "right_eye": (0.7, 0.35),
    "nose": (0.5, 0.55),
    "mouth": (0.5, 0.78),
}
CROP_SIZE = 16


def resize_crop(crop, size=CROP_SIZE):
    """Nearest-neighbour resize of an ``(h, w, 3)`` crop to ``size x size``."""
    crop = np.asarray(crop, dtype=np.float64)
    rows = (np.arange(size) * crop.shape[0]) // size
    cols = (np.arange(size) * crop.shape[1]) // size
    return crop[rows][:, cols]


class ToyFaceEmbedder:
    """Fixed random projection of a 16x16 nearest-resized crop to 512 dims."""

    shareable = True

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        rng = np.random.default_rng([seed, 11])
        self.dim = dim
        self.proj = rng.standard_normal((dim, CROP_SIZE * CROP_SIZE * 3)) / math.sqrt(CROP_SIZE * CROP_SIZE * 3)

    def __call__(self, crop) -> np.ndarray:
        x = resize_crop(crop).ravel() / 255.0
        x = x - x.mean()
        return self.proj @ x


class ToyAttributeModel:
    shareable = True

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng([seed, 13])
        self.proj = rng.standard_normal((N_ATTRIBUTES, CROP_SIZE * CROP_SIZE * 3)) / 8.0

    def __call__(self, crop) -> np.ndarray:
        x = resize_crop(crop).ravel() / 255.0 - 0.5
        return 1.0 / (1.0 + np.exp(-(self.proj @ x)))


class ToyFaceDetector:
    """Finds face-coloured rectangles and fills in keypoints, attributes and embedding."""

    shareable = True

    def __init__(self, seed: int = 0, min_area: int = 16):
        self.embedder = ToyFaceEmbedder(seed)
        self.attribute_model = ToyAttributeModel(seed)
        self.min_area = min_area

    def __call__(self, image) -> list[FaceRecord]:
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractViolation(f"expected an (H, W, 3) image, got {img.shape}")
        mask = (img[..., 1] < FACE_GREEN_MAX) & (img[..., 0] > FACE_RB_MIN) & (img[..., 2] > FACE_RB_MIN)
        labels, _ = ndimage.label(mask)
        faces = []
        for sl in ndimage.find_objects(labels):
            if sl is None:
                continue
            y0, y1 = sl[0].start, sl[0].stop
            x0, x1 = sl[1].start, sl[1].stop
            if (x1 - x0) * (y1 - y0) < self.min_area:
                continue
            crop = img[y0:y1, x0:x1]
            kps = {name: (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0)) for name, (fx, fy) in KEYPOINT_LAYOUT.items()}
            faces.append(FaceRecord((x0, y0, x1, y1), kps, self.attribute_model(crop), self.embedder(crop)))
        return faces


def detect_faces(image, detector, warnings=None) -> list[FaceRecord]:
    """Detected faces sorted by bbox area, largest first (ties by top-left corner)."""
    try:
        faces = list(detector(image))
    except Exception as exc:
        log.warning("face detector failed: %s", exc)
        if warnings is not None:
            warnings.append(f"face detector failed: {exc}")
        return []
    H, W = np.asarray(image).shape[:2]
    for f in faces:
        f.check_bounds((H, W))
    return sorted(faces, key=lambda f: (-f.area, f.bbox[1], f.bbox[0]))


def face_to_json(face: FaceRecord, image_id: str) -> str:
    emb = np.ascontiguousarray(face.identity_embedding, dtype="<f4").tobytes()
    return json.dumps({
        "image_id": image_id,
        "bbox": list(face.bbox),
        "keypoints": {k: list(v) for k, v in face.keypoints.items()},
        "attributes": [float(a) for a in face.attributes],
        "identity_embedding": base64.b64encode(emb).decode("ascii"),
    }, sort_keys=True)


def face_from_json(line: str) -> tuple[str, FaceRecord]:
    rec = json.loads(line)
    emb = np.frombuffer(base64.b64decode(rec["identity_embedding"]), dtype="<f4")
    face = FaceRecord(tuple(rec["bbox"]), {k: tuple(v) for k, v in rec["keypoints"].items()},
                      np.array(rec["attributes"]), emb.astype(np.float64))
    return rec["image_id"], face


def write_faces_jsonl(path, items):
    """``items`` is an iterable of ``(image_id, FaceRecord)``."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, face in items:
            fh.write(face_to_json(face, image_id) + "\n")


def read_faces_jsonl(path) -> list[tuple[str, FaceRecord]]:
    with open(path, encoding="utf-8") as fh:
        return [face_from_json(line) for line in fh if line.strip()]
