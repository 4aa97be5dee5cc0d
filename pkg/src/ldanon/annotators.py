"""Control-signal extraction, identity control and caption embedding.

The toy extractors are fixtures with simple closed forms; they are not
approximations of real depth, normal or pose networks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .diffusion import LatentTensor
from .errors import ConfigError, ContractViolation
from .guidance import DEFAULT_CONTROL_SETTINGS, SPATIAL_KINDS, ControlSignal, PromptEmbedding

log = logging.getLogger(__name__)

TOY_CAPTION = "a photo of a person"
DEFAULT_NEGATIVE_PROMPT = "a photo of the same person, identical face"
PROMPT_DIM = 512


class ExtractionError(RuntimeError):
    def __init__(self, kind, cause):
        super().__init__(f"{kind} extractor failed: {cause}")
        self.kind = kind


@dataclass
class CaptionResult:
    text: str
    embedding: PromptEmbedding
    warnings: list = field(default_factory=list)


def _gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=2) / 255.0


class ToyExtractor:
    """Deterministic map from an ``(H, W, 3)`` image to a ``(k, H, W)`` tensor."""

    shareable = True
    version = "toy-1"

    def __init__(self, kind, fn):
        self.kind = kind
        self._fn = fn

    def __call__(self, image):
        return self._fn(image)

    def __repr__(self):
        return f"ToyExtractor({self.kind!r})"


def _depth(image):
    return _gray(image)[None]


def _lineart(image):
    g = _gray(image)
    dx = np.zeros_like(g)
    dy = np.zeros_like(g)
    dx[:, :-1] = np.diff(g, axis=1)
    dy[:-1, :] = np.diff(g, axis=0)
    return np.hypot(dx, dy)[None]


def _segmentation(image):
    bands = np.minimum(np.floor(_gray(image) * 8), 7)
    return (bands / 7.0)[None]


def _pose(image):
    H, W = np.asarray(image).shape[:2]
    return np.zeros((3, H, W))


def toy_extractors(seed: int = 0) -> list:
    """Five toy extractors in canonical order (depth, normal, segmentation, pose, lineart)."""
    rng = np.random.default_rng([seed, 7])
    direction = np.abs(rng.standard_normal(3))
    direction /= np.linalg.norm(direction)

    def _normal(image):
        H, W = np.asarray(image).shape[:2]
        return np.broadcast_to(direction[:, None, None], (3, H, W)).copy()

    fns = {"depth": _depth, "normal": _normal, "segmentation": _segmentation,
           "pose": _pose, "lineart": _lineart}
    return [ToyExtractor(kind, fns[kind]) for kind in SPATIAL_KINDS]


def _as_f32_precision(arr):
    # control maps are held at float32 precision so cached and fresh maps agree exactly
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def extract_controls(image, registry, settings=None, cache=None) -> list[ControlSignal]:
    """Run each registered extractor and attach its weight and cutoff.

    ``settings`` maps kind to ``(weight, cutoff_fraction)`` and defaults to
    ``DEFAULT_CONTROL_SETTINGS``. Output order is canonical regardless of the
    registry order.
    """
    settings = DEFAULT_CONTROL_SETTINGS if settings is None else settings
    by_kind = {}
    for adapter in registry:
        if adapter.kind not in SPATIAL_KINDS:
            raise ConfigError(f"unsupported extractor kind {adapter.kind!r}")
        if adapter.kind in by_kind:
            raise ConfigError(f"duplicate extractor for kind {adapter.kind!r}")
        by_kind[adapter.kind] = adapter
    image = np.asarray(image)
    H, W = image.shape[:2]
    signals = []
    for kind in SPATIAL_KINDS:
        adapter = by_kind.get(kind)
        if adapter is None:
            continue
        tensor = cache.get(image, kind, adapter.version) if cache is not None else None
        if tensor is None:
            try:
                tensor = _as_f32_precision(adapter(image))
            except Exception as exc:
                raise ExtractionError(kind, exc) from exc
            if cache is not None:
                cache.put(image, kind, adapter.version, tensor)
        if tensor.ndim == 2:
            tensor = tensor[None]
        if tensor.shape[1:] != (H, W):
            raise ContractViolation(f"{kind} map {tensor.shape} does not match image {H}x{W}")
        weight, cutoff = settings.get(kind, DEFAULT_CONTROL_SETTINGS[kind])
        signals.append(ControlSignal(kind, tensor, weight=weight, cutoff_fraction=cutoff))
    return signals


def identity_control(latent: LatentTensor) -> ControlSignal:
    """Wrap the source latent as the identity control (weight 1, never cut off)."""
    return ControlSignal("identity_latent", latent.data, weight=1.0, cutoff_fraction=1.0)


class ToyTextEncoder:
    """Whitespace tokens mapped to fixed pseudo-random unit vectors.

    A begin token is always prepended, so every text (even empty) encodes to at
    least one token.
    """

    shareable = True

    def __init__(self, dim: int = PROMPT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _token(self, tok: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, zlib.crc32(tok.encode("utf-8"))])
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, text: str, polarity: str = "positive") -> PromptEmbedding:
        toks = ["<bos>"] + text.lower().split()
        return PromptEmbedding(np.stack([self._token(t) for t in toks]), polarity)


class ToyCaptioner:
    shareable = True

    def __init__(self):
        self.calls = 0

    def __call__(self, image) -> str:
        self.calls += 1
        return TOY_CAPTION


def extract_caption(image, captioner, text_encoder) -> CaptionResult:
    warnings = []
    try:
        text = str(captioner(image))
    except Exception as exc:
        log.warning("captioner failed, using empty template: %s", exc)
        warnings.append(f"captioner failed: {exc}")
        text = ""
    return CaptionResult(text, text_encoder(text, "positive"), warnings)


class AnnotationCache:
    """On-disk cache of control maps keyed by image content, kind and extractor version.

    Each entry is a raw little-endian float32 ``.bin`` plus a ``.json``
    sidecar holding kind, shape and extractor version.
    """

    def __init__(self, root):
        self.root = Path(root)

    def key(self, image, kind: str, version: str) -> str:
        h = hashlib.sha256()
        arr = np.ascontiguousarray(image)
        h.update(repr((arr.shape, arr.dtype.str)).encode())
        h.update(arr.tobytes())
        h.update(f"|{kind}|{version}".encode())
        return h.hexdigest()

    def _paths(self, key):
        return self.root / f"{key}.bin", self.root / f"{key}.json"

    def get(self, image, kind, version):
        bin_path, meta_path = self._paths(self.key(image, kind, version))
        if not (bin_path.exists() and meta_path.exists()):
            return None
        meta = json.loads(meta_path.read_text())
        if meta.get("kind") != kind or meta.get("extractor_version") != version:
            return None
        data = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
        return data.reshape(meta["shape"]).astype(np.float64)

    def put(self, image, kind, version, tensor):
        key = self.key(image, kind, version)
        bin_path, meta_path = self._paths(key)
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        binfmt.atomic_write_bytes(bin_path, arr.tobytes())
        meta = {"kind": kind, "shape": list(arr.shape), "extractor_version": version, "dtype": "float32"}
        binfmt.atomic_write_bytes(meta_path, json.dumps(meta, sort_keys=True).encode())
