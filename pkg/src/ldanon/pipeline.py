"""Base and Light anonymization flows, batch runner and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import binfmt
from .annotators import (
    DEFAULT_NEGATIVE_PROMPT,
    AnnotationCache,
    ToyCaptioner,
    ToyTextEncoder,
    extract_caption,
    extract_controls,
    identity_control,
    toy_extractors,
)
from .attributes import ToyFaceDetector, detect_faces, encode_attribute_map
from .diffusion import (
    DOWNSAMPLE,
    RHO,
    SIGMA_MAX,
    SIGMA_MIN,
    ToyAutoencoder,
    ToyDenoiser,
    img2img_init,
    karras_sigma_schedule,
    sample,
)
from .errors import ConfigError, ContractViolation, NoCandidateError
from .guidance import (
    DEFAULT_CONTROL_SETTINGS,
    DEFAULT_OMEGA,
    SPATIAL_KINDS,
    ControlSignal,
    PromptEmbedding,
    compute_guidance_weights,
)
from .identity_pool import MIN_SWAP_DISTANCE, IdentityPool, assemble_conditioning, farthest_member, find_swap

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

VARIANT_DEFAULTS = {
    "base": {"steps": 16, "noise_strength": 0.9, "resolution": 768, "a_s": 1.25},
    "light": {"steps": 30, "noise_strength": 0.6, "resolution": 768, "a_s": 1.0},
}
BASE_PRESETS = (1.0, 1.25)


def _default_controls():
    return {k: {"weight": w, "cutoff": c} for k, (w, c) in DEFAULT_CONTROL_SETTINGS.items()}


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "base"
    a_s: float = 1.25
    omega: float = DEFAULT_OMEGA
    steps: int = 16
    noise_strength: float = 0.9
    resolution: int = 768
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: float = RHO
    controls: dict = field(default_factory=_default_controls)
    attribute_weight: float = 1.0
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT
    pool_path: str | None = None
    swap_min_dist: float = MIN_SWAP_DISTANCE
    swap_fallback: str = "error"
    conditioning_mode: str = "pair"
    seed: int = 0
    adapter_seed: int = 0
    failure_policy: str = "skip"
    workers: int = 1
    cache_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "PipelineConfig":
        if variant not in VARIANT_DEFAULTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANT_DEFAULTS)}, got {variant!r}")
        values = dict(VARIANT_DEFAULTS[variant], variant=variant)
        values.update(overrides)
        return cls(**values).validated()

    def validated(self) -> "PipelineConfig":
        problems = validate_config(self)
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def control_settings(self) -> dict:
        return {k: (float(v["weight"]), float(v["cutoff"])) for k, v in self.controls.items()}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def validate_config(cfg: PipelineConfig) -> list[str]:
    problems = []
    if cfg.schema_version != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.schema_version}")
    if cfg.variant not in VARIANT_DEFAULTS:
        problems.append(f"variant: must be one of {sorted(VARIANT_DEFAULTS)}")
    if not isinstance(cfg.a_s, (int, float)) or cfg.a_s < 0:
        problems.append("a_s: must be a number >= 0")
    if not isinstance(cfg.omega, (int, float)) or cfg.omega <= 0:
        problems.append("omega: must be a number > 0")
    if not isinstance(cfg.steps, int) or cfg.steps < 1:
        problems.append("steps: must be an integer >= 1")
    if not isinstance(cfg.noise_strength, (int, float)) or not 0 < cfg.noise_strength <= 1:
        problems.append("noise_strength: must lie in (0, 1]")
    if not isinstance(cfg.resolution, int) or cfg.resolution < DOWNSAMPLE or cfg.resolution % DOWNSAMPLE:
        problems.append(f"resolution: must be a positive multiple of {DOWNSAMPLE}")
    if not (cfg.sigma_min > 0 and cfg.sigma_max > cfg.sigma_min and cfg.rho > 0):
        problems.append("sigma_min/sigma_max/rho: need 0 < sigma_min < sigma_max and rho > 0")
    if not isinstance(cfg.controls, dict):
        problems.append("controls: must map kind to {weight, cutoff}")
    else:
        for kind, spec in cfg.controls.items():
            if kind not in SPATIAL_KINDS:
                problems.append(f"controls.{kind}: unknown control kind")
                continue
            if not isinstance(spec, dict) or set(spec) != {"weight", "cutoff"}:
                problems.append(f"controls.{kind}: needs exactly the keys weight and cutoff")
                continue
            if not 0 <= spec["weight"] <= 1:
                problems.append(f"controls.{kind}.weight: must lie in [0, 1]")
            if not 0 < spec["cutoff"] <= 1:
                problems.append(f"controls.{kind}.cutoff: must lie in (0, 1]")
    if not 0 <= cfg.attribute_weight <= 1:
        problems.append("attribute_weight: must lie in [0, 1]")
    if cfg.swap_min_dist < 0:
        problems.append("swap_min_dist: must be >= 0")
    if cfg.swap_fallback not in ("error", "farthest"):
        problems.append("swap_fallback: must be 'error' or 'farthest'")
    if cfg.conditioning_mode not in ("pair", "mean"):
        problems.append("conditioning_mode: must be 'pair' or 'mean'")
    if cfg.failure_policy not in ("skip", "abort"):
        problems.append("failure_policy: must be 'skip' or 'abort'")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        problems.append("workers: must be an integer >= 1")
    if not isinstance(cfg.seed, int) or not isinstance(cfg.adapter_seed, int):
        problems.append("seed/adapter_seed: must be integers")
    return problems


def config_from_mapping(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    variant = data.get("variant", "base")
    values = {k: v for k, v in data.items() if k != "variant"}
    if "controls" in values:
        merged = _default_controls()
        for kind, spec in (values["controls"] or {}).items():
            merged[kind] = dict(merged.get(kind, {}), **spec) if isinstance(spec, dict) else spec
        values["controls"] = merged
    try:
        return PipelineConfig.for_variant(variant, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_mapping(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


@dataclass
class Adapters:
    denoiser: object
    autoencoder: object
    extractors: list
    captioner: object
    text_encoder: object
    detector: object
    pool: IdentityPool | None = None
    cache: AnnotationCache | None = None

    @property
    def shareable(self) -> bool:
        parts = [self.denoiser, self.autoencoder, self.captioner, self.text_encoder, self.detector, *self.extractors]
        return all(getattr(p, "shareable", False) for p in parts)


def toy_adapters(seed: int = 0, pool: IdentityPool | None = None, cache: AnnotationCache | None = None) -> Adapters:
    return Adapters(
        denoiser=ToyDenoiser(seed),
        autoencoder=ToyAutoencoder(),
        extractors=toy_extractors(seed),
        captioner=ToyCaptioner(),
        text_encoder=ToyTextEncoder(seed=seed),
        detector=ToyFaceDetector(seed),
        pool=pool,
        cache=cache,
    )


# geometry: longest side scaled to the working resolution, then edge-padded to a square

def _resize_float(img: np.ndarray, size_hw) -> np.ndarray:
    h, w = size_hw
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((w, h), Image.BICUBIC))
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def preprocess(image, resolution: int):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"expected an RGB image, got shape {img.shape}")
    H, W = img.shape[:2]
    if (H, W) == (resolution, resolution):
        return img, (H, W, H, W, 0, 0)
    scale = resolution / max(H, W)
    nh, nw = max(1, round(H * scale)), max(1, round(W * scale))
    resized = np.clip(_resize_float(img, (nh, nw)), 0, 255)
    top = (resolution - nh) // 2
    left = (resolution - nw) // 2
    padded = np.pad(resized, ((top, resolution - nh - top), (left, resolution - nw - left), (0, 0)), mode="edge")
    return padded, (H, W, nh, nw, top, left)


def postprocess(out, geometry) -> np.ndarray:
    H, W, nh, nw, top, left = geometry
    crop = out[top:top + nh, left:left + nw]
    if (nh, nw) != (H, W):
        crop = _resize_float(crop, (H, W))
    return np.clip(crop, 0.0, 255.0)


def _schedule(config):
    return karras_sigma_schedule(config.steps, config.sigma_min, config.sigma_max, config.rho)


def _check_latent(latent, config):
    side = config.resolution // DOWNSAMPLE
    if latent.shape[1:] != (side, side):
        raise ContractViolation(f"latent {latent.shape} does not match resolution {config.resolution}")


def anonymize_base(image, config: PipelineConfig, adapters: Adapters, seed: int | None = None,
                   trace: list | None = None):
    """Multi-control anonymization with the identity latent as negative control.

    Returns ``(image, record)``; ``image`` is float in [0, 255] at the input size.
    """
    if config.variant != "base":
        raise ConfigError("anonymize_base needs a base-variant config")
    seed = config.seed if seed is None else seed
    work, geometry = preprocess(image, config.resolution)
    latent = adapters.autoencoder.encode(work)
    _check_latent(latent, config)
    controls = extract_controls(work, adapters.extractors, config.control_settings(), adapters.cache)
    caption = extract_caption(work, adapters.captioner, adapters.text_encoder)
    negative = adapters.text_encoder(config.negative_prompt, "negative")
    weights = compute_guidance_weights(config.a_s, config.omega)
    schedule = _schedule(config)
    x_start, start_step = img2img_init(latent, config.noise_strength, schedule, seed)
    final = sample(adapters.denoiser, x_start, start_step, schedule, controls + [identity_control(latent)],
                   (caption.embedding, negative), weights, seed=seed, trace=trace)
    out = postprocess(adapters.autoencoder.decode(final), geometry)
    record = {
        "variant": "base",
        "a_s": config.a_s,
        "weights": list(weights.as_tuple()),
        "start_step": start_step,
        "caption": caption.text,
        "controls": [c.kind for c in controls],
        "warnings": list(caption.warnings),
    }
    return out, record


def anonymize_light(image, config: PipelineConfig, adapters: Adapters, seed: int | None = None,
                    trace: list | None = None):
    """Attribute-map plus identity-swap anonymization; captions are not used."""
    if config.variant != "light":
        raise ConfigError("anonymize_light needs a light-variant config")
    if adapters.pool is None:
        raise ConfigError("light variant needs an identity pool")
    seed = config.seed if seed is None else seed
    warnings = []
    work, geometry = preprocess(image, config.resolution)
    latent = adapters.autoencoder.encode(work)
    _check_latent(latent, config)
    faces = detect_faces(work, adapters.detector, warnings)
    if not faces:
        warnings.append("no faces detected; attribute map is empty and no swap was made")
    amap = encode_attribute_map(faces, work.shape[:2], latent.shape[1:])
    tokens, swaps = [], []
    for i, face in enumerate(faces):
        try:
            swap = find_swap(face.identity_embedding, adapters.pool, config.swap_min_dist, query_id=f"face{i}")
        except NoCandidateError:
            if config.swap_fallback != "farthest":
                raise
            swap = farthest_member(face.identity_embedding, adapters.pool, query_id=f"face{i}")
            warnings.append(f"face {i}: no identity beyond {config.swap_min_dist}; used farthest member")
        swapped = adapters.pool.embeddings[adapters.pool.ids.index(swap.chosen_id)]
        tokens.append(assemble_conditioning(face.identity_embedding, swapped, config.conditioning_mode))
        swaps.append({"face": i, "chosen_id": swap.chosen_id, "distance": swap.distance})
    dim = adapters.pool.dim
    positive = PromptEmbedding(np.concatenate(tokens) if tokens else np.zeros((0, dim)), "positive")
    negative = adapters.text_encoder(config.negative_prompt, "negative")
    weights = compute_guidance_weights(config.a_s, config.omega)
    controls = [ControlSignal("attribute_map", amap, weight=config.attribute_weight)]
    if weights.w0 != 0.0:
        controls.append(identity_control(latent))
    schedule = _schedule(config)
    x_start, start_step = img2img_init(latent, config.noise_strength, schedule, seed)
    final = sample(adapters.denoiser, x_start, start_step, schedule, controls, (positive, negative), weights,
                   seed=seed, trace=trace)
    out = postprocess(adapters.autoencoder.decode(final), geometry)
    record = {
        "variant": "light",
        "a_s": config.a_s,
        "weights": list(weights.as_tuple()),
        "start_step": start_step,
        "faces": len(faces),
        "attribute_map_shape": list(amap.shape),
        "swaps": swaps,
        "warnings": warnings,
    }
    return out, record


def anonymize(image, config, adapters, seed=None, trace=None):
    fn = anonymize_base if config.variant == "base" else anonymize_light
    return fn(image, config, adapters, seed=seed, trace=trace)


def derive_seed(run_seed: int, content_hash: str) -> int:
    digest = hashlib.sha256(f"{run_seed}:{content_hash}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def list_inputs(source) -> list[Path]:
    if isinstance(source, (list, tuple)):
        return [Path(p) for p in source]
    src = Path(source)
    if src.is_file():
        return [src]
    if not src.is_dir():
        raise FileNotFoundError(f"input {src} does not exist")
    return sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def write_png(path, image):
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    binfmt.atomic_write_bytes(path, buf.getvalue())


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    records: list
    timings: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        statuses = [r["status"] for r in self.records]
        return {
            "total": len(statuses),
            "ok": statuses.count("ok"),
            "failed": statuses.count("error"),
            "not_run": statuses.count("not_run"),
        }

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "config_hash": self.config_hash,
            "records": self.records,
            "summary": self.summary,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        binfmt.atomic_write_bytes(out_dir / "manifest.json", self.to_json().encode("utf-8"))
        # wall-clock data lives apart from the manifest so reruns stay byte-identical
        binfmt.atomic_write_bytes(out_dir / "timings.json",
                                  (json.dumps(self.timings, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _process_one(path: Path, config, adapters):
    t0 = time.perf_counter()
    raw = path.read_bytes()
    content = hashlib.sha256(raw).hexdigest()
    seed = derive_seed(config.seed, content)
    base = {"input": path.name, "input_sha256": content, "seed": seed}
    try:
        image = read_image(path)
        out, rec = anonymize(image, config, adapters, seed=seed)
    except Exception as exc:  # recorded per image; policy decides what happens next
        return dict(base, status="error", error=f"{type(exc).__name__}: {exc}", warnings=[]), None, \
            time.perf_counter() - t0
    rec.pop("caption", None)
    warnings = rec.pop("warnings", [])
    return dict(base, status="ok", error=None, warnings=warnings, details=rec), out, time.perf_counter() - t0


def run_batch(inputs, config: PipelineConfig, adapters: Adapters, out_dir, workers: int | None = None) -> RunManifest:
    """Anonymize every input image and write ``out_dir/images``, ``manifest.json`` and ``timings.json``.

    Per-image seeds depend only on the run seed and the file content, so output
    does not depend on input order or worker count. Failures are recorded; with
    ``failure_policy="abort"`` the remaining inputs are marked ``not_run``.
    """
    config.validated()
    paths = list_inputs(inputs)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or config.workers
    if workers > 1 and not adapters.shareable:
        log.warning("adapters are not shareable across threads; running with one worker")
        workers = 1
    chash = config.hash()
    records, timings = [], {}
    aborted = False
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_process_one, p, config, adapters) for p in paths]
        for path, fut in zip(paths, futures):
            if aborted:
                fut.cancel()
                records.append({"input": path.name, "status": "not_run", "error": None, "warnings": [],
                                "config_hash": chash})
                continue
            rec, out, seconds = fut.result()
            rec["config_hash"] = chash
            timings[path.name] = seconds
            if out is not None:
                rel = Path("images") / (path.stem + ".png")
                write_png(out_dir / rel, out)
                rec["output"] = str(rel)
            else:
                rec["output"] = None
                if config.failure_policy == "abort":
                    aborted = True
            records.append(rec)
    manifest = RunManifest(config.to_dict(), chash, records, timings)
    manifest.write(out_dir)
    return manifest
