"""Latent diffusion plumbing: schedules, img2img start, the guided sampling loop.

Real denoisers and autoencoders plug in through small call contracts; the toy
adapters here are affine and exactly invertible so every stage of the loop has
a closed form to test against.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import binfmt
from .errors import ContractViolation, DomainError
from .guidance import (
    ControlSignal,
    GuidanceWeights,
    PromptEmbedding,
    combine_noise_predictions,
    effective_control_weight,
)

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
SIGMA_MIN = 0.0292
SIGMA_MAX = 14.6146
RHO = 7.0


@dataclass(frozen=True, eq=False)
class LatentTensor:
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != LATENT_CHANNELS:
            raise ContractViolation(f"latent must be shaped ({LATENT_CHANNELS}, h, w), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("latent contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class SigmaSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2 or s[-1] != 0.0:
            raise ContractViolation("schedule must be a 1-D sequence ending in 0")
        if np.any(np.diff(s) >= 0) or np.any(s[:-1] <= 0):
            raise ContractViolation("schedule must be strictly decreasing and positive before the final 0")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @property
    def n(self) -> int:
        return self.sigmas.size - 1


class DenoiserAdapter(Protocol):
    """``(x, sigma, controls, prompt) -> eps`` with ``eps.shape == x.shape``.

    ``controls`` is a list of ``(ControlSignal, effective_weight)`` pairs with
    nonzero weights only. ``shareable`` tells the pipeline whether one
    instance may serve concurrent samples.
    """

    shareable: bool

    def __call__(self, x: np.ndarray, sigma: float, controls: list, prompt: PromptEmbedding) -> np.ndarray: ...


class AutoencoderAdapter(Protocol):
    def encode(self, image: np.ndarray) -> LatentTensor: ...

    def decode(self, latent: LatentTensor) -> np.ndarray: ...


def karras_sigma_schedule(n: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                          rho: float = RHO) -> SigmaSchedule:
    """Noise levels evenly spaced in ``sigma ** (1 / rho)``, with a trailing 0."""
    if int(n) != n or n < 1:
        raise DomainError(f"step count must be a positive integer, got {n}")
    if not (sigma_min > 0 and sigma_max > sigma_min and rho > 0):
        raise DomainError(f"invalid schedule bounds sigma_min={sigma_min} sigma_max={sigma_max} rho={rho}")
    n = int(n)
    if n == 1:
        return SigmaSchedule(np.array([sigma_max, 0.0]))
    ramp = np.arange(n) / (n - 1)
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    # pin the endpoints; the power round-trip can drift by an ulp
    sigmas[0] = sigma_max
    sigmas[-1] = sigma_min
    return SigmaSchedule(np.append(sigmas, 0.0))


def img2img_init(latent: LatentTensor, strength: float, schedule: SigmaSchedule, seed: int):
    """Noise an encoded image to the level where sampling should start.

    Returns ``(x_start, start_step)`` with ``start_step = n - floor(strength * n)``.
    """
    if not 0.0 < strength <= 1.0:
        raise DomainError(f"strength must lie in (0, 1], got {strength}")
    n = schedule.n
    start_step = n - math.floor(strength * n)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(latent.shape)
    # start_step == n only when strength * n < 1; sigmas[n] is 0 then
    x = latent.data + schedule.sigmas[start_step] * noise
    return LatentTensor(x), start_step


def euler_step(x, eps, sigma, sigma_next, rng=None):
    # eps-prediction Euler: the denoised direction (x - x0) / sigma is eps itself
    return x + (sigma_next - sigma) * eps


def _split_controls(controls: Sequence[ControlSignal]):
    identity = [c for c in controls if c.kind == "identity_latent"]
    if len(identity) > 1:
        raise ContractViolation("at most one identity_latent control may be supplied")
    others = [c for c in controls if c.kind != "identity_latent"]
    kinds = [c.kind for c in others]
    if len(set(kinds)) != len(kinds):
        raise ContractViolation(f"duplicate control kinds: {kinds}")
    return (identity[0] if identity else None), others


def _query(denoiser, x, sigma, active, prompt):
    eps = np.asarray(denoiser(x, sigma, active, prompt), dtype=np.float64)
    if eps.shape != x.shape:
        raise ContractViolation(f"denoiser returned shape {eps.shape} for latent {x.shape}")
    return eps


def sample(denoiser: DenoiserAdapter, x_start: LatentTensor, start_step: int, schedule: SigmaSchedule,
           controls: Sequence[ControlSignal], prompts: tuple, weights: GuidanceWeights,
           stepper: Callable = euler_step, *, seed: int | None = None, trace: list | None = None) -> LatentTensor:
    """Run the guided denoising loop from ``start_step`` to the end of ``schedule``.

    The identity-latent control (if any) feeds only the identity slot; all other
    controls feed the negative- and positive-prompt slots. A slot whose weight
    is zero is never queried, and a control whose effective weight at a step
    is zero is not passed to the denoiser at that step.

    When ``trace`` is a list, one dict per executed step is appended to it.
    """
    n = schedule.n
    if not 0 <= start_step <= n:
        raise ContractViolation(f"start_step {start_step} outside [0, {n}]")
    positive, negative = prompts
    identity, spatial = _split_controls(controls)
    if weights.w0 != 0.0 and identity is None:
        raise ContractViolation("nonzero identity weight but no identity_latent control supplied")
    rng = np.random.default_rng(seed)
    x = np.array(x_start.data, dtype=np.float64)
    for i in range(start_step, n):
        sigma = float(schedule.sigmas[i])
        sigma_next = float(schedule.sigmas[i + 1])
        active = []
        for c in spatial:
            w = effective_control_weight(c, i, n)
            if w != 0.0:
                active.append((c, w))
        eps_id = eps_neg = eps_pos = None
        slots = {}
        if weights.w0 != 0.0:
            w_id = effective_control_weight(identity, i, n)
            id_active = [(identity, w_id)] if w_id != 0.0 else []
            eps_id = _query(denoiser, x, sigma, id_active, positive)
            slots["identity"] = [c.kind for c, _ in id_active]
        if weights.w1 != 0.0:
            eps_neg = _query(denoiser, x, sigma, active, negative)
            slots["negative"] = [c.kind for c, _ in active]
        if weights.w2 != 0.0:
            eps_pos = _query(denoiser, x, sigma, active, positive)
            slots["positive"] = [c.kind for c, _ in active]
        eps = combine_noise_predictions(weights, eps_id, eps_neg, eps_pos)
        x = stepper(x, eps, sigma, sigma_next, rng)
        if trace is not None:
            trace.append({
                "step": i,
                "sigma": sigma,
                "weights": weights.as_tuple(),
                "slots": slots,
                "control_weights": {c.kind: w for c, w in active},
                "prompt_tokens": {"positive": len(positive), "negative": len(negative)},
            })
    return LatentTensor(x)


def _block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    c, H, W = arr.shape
    if H % factor or W % factor:
        raise DomainError(f"spatial size {H}x{W} not divisible by {factor}")
    return arr.reshape(c, H // factor, factor, W // factor, factor).mean(axis=(2, 4))


def _kind_code(kind: str) -> int:
    return zlib.crc32(kind.encode("ascii"))


class ToyDenoiser:
    """Affine stand-in for a conditional denoiser.

    ``eps = gain * (x - target) / sigma`` where ``target`` is a fixed linear
    image of the controls and prompt::

        target = sum_i w_i * B_i(control_i) + (1 - w_identity) * C(prompt)

    ``B`` for the identity latent is the identity map, so with the identity
    control at full weight the model pulls ``x`` straight to the source
    latent; with ``gain = 1`` one Euler step onto sigma 0 lands on it exactly.
    Spatial maps are block-averaged down to latent size, then mixed to 4
    channels by a seed-derived matrix. ``C`` maps the mean prompt token to a
    per-channel offset.
    """

    shareable = True

    def __init__(self, seed: int = 0, prompt_dim: int = 512, gain: float = 1.0):
        self.seed = int(seed)
        self.prompt_dim = int(prompt_dim)
        self.gain = float(gain)
        rng = np.random.default_rng([self.seed, 0])
        self.prompt_map = rng.standard_normal((LATENT_CHANNELS, self.prompt_dim)) / math.sqrt(self.prompt_dim)
        self._mixes = {}

    def _mix(self, kind: str, channels: int) -> np.ndarray:
        key = (kind, channels)
        mix = self._mixes.get(key)
        if mix is None:
            rng = np.random.default_rng([self.seed, 1, _kind_code(kind), channels])
            mix = 0.5 * rng.standard_normal((LATENT_CHANNELS, channels)) / math.sqrt(channels)
            self._mixes[key] = mix
        return mix

    def control_term(self, control: ControlSignal, latent_hw) -> np.ndarray:
        t = control.tensor
        if control.kind == "identity_latent":
            if t.shape != (LATENT_CHANNELS, *latent_hw):
                raise ContractViolation(f"identity latent shape {t.shape} does not match {latent_hw}")
            return t
        if t.ndim == 2:
            t = t[None]
        factor = t.shape[1] // latent_hw[0]
        if factor < 1 or t.shape[1] != factor * latent_hw[0] or t.shape[2] != factor * latent_hw[1]:
            raise ContractViolation(f"{control.kind} tensor {t.shape} incompatible with latent {latent_hw}")
        pooled = _block_mean(t, factor) if factor > 1 else t
        return np.einsum("lc,chw->lhw", self._mix(control.kind, t.shape[0]), pooled)

    def prompt_term(self, prompt: PromptEmbedding) -> np.ndarray:
        if prompt is None or len(prompt) == 0:
            return np.zeros(LATENT_CHANNELS)
        if prompt.dim != self.prompt_dim:
            raise ContractViolation(f"prompt dim {prompt.dim} != denoiser prompt dim {self.prompt_dim}")
        return self.prompt_map @ prompt.tokens.mean(axis=0)

    def target(self, latent_hw, controls, prompt) -> np.ndarray:
        out = np.zeros((LATENT_CHANNELS, *latent_hw))
        id_weight = 0.0
        for control, w in controls:
            if control.kind == "identity_latent":
                id_weight += w
            out += w * self.control_term(control, latent_hw)
        out += (1.0 - id_weight) * self.prompt_term(prompt)[:, None, None]
        return out

    def __call__(self, x, sigma, controls, prompt):
        x = np.asarray(x, dtype=np.float64)
        if sigma <= 0:
            raise DomainError("toy denoiser needs sigma > 0")
        return self.gain * (x - self.target(x.shape[1:], controls, prompt)) / sigma


def toy_denoiser(seed: int = 0, **kwargs) -> ToyDenoiser:
    return ToyDenoiser(seed, **kwargs)


# columns are orthonormal, so MIX.T @ MIX == I exactly in binary floating point
_AE_MIX = 0.5 * np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
])


class ToyAutoencoder:
    """8x8 block average per colour channel, mixed into 4 latent channels.

    Images are ``(H, W, 3)`` float arrays in [0, 255]. ``decode`` applies the
    transpose mix and nearest upsampling, so ``decode(encode(img))`` is the
    blockwise-mean image.
    """

    shareable = True
    factor = DOWNSAMPLE

    def encode(self, image) -> LatentTensor:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractViolation(f"expected an (H, W, 3) image, got {img.shape}")
        pooled = _block_mean(np.moveaxis(img / 255.0, 2, 0), self.factor)
        return LatentTensor(np.einsum("lc,chw->lhw", _AE_MIX, pooled))

    def decode(self, latent: LatentTensor) -> np.ndarray:
        pooled = np.einsum("lc,lhw->chw", _AE_MIX, latent.data)
        up = pooled.repeat(self.factor, axis=1).repeat(self.factor, axis=2)
        return np.moveaxis(up, 0, 2) * 255.0


def toy_autoencoder() -> ToyAutoencoder:
    return ToyAutoencoder()


# out-of-process denoiser messages

def encode_denoise_request(x, sigma: float, controls: list, prompt: PromptEmbedding) -> bytes:
    arrays = {"x": x, "prompt": prompt.tokens}
    slots = []
    for idx, (control, w) in enumerate(controls):
        name = f"control_{idx}"
        arrays[name] = control.tensor
        slots.append({"array": name, "kind": control.kind, "weight": control.weight,
                      "effective_weight": w, "cutoff_fraction": control.cutoff_fraction})
    meta = {"type": "denoise_request", "sigma": float(sigma), "controls": slots,
            "prompt_polarity": prompt.polarity}
    return binfmt.pack(arrays, meta)


def decode_denoise_request(blob: bytes):
    arrays, meta = binfmt.unpack(blob)
    if meta.get("type") != "denoise_request":
        raise ContractViolation("payload is not a denoise request")
    controls = []
    for slot in meta["controls"]:
        sig = ControlSignal(slot["kind"], arrays[slot["array"]], weight=slot["weight"],
                            cutoff_fraction=slot["cutoff_fraction"])
        controls.append((sig, float(slot["effective_weight"])))
    prompt = PromptEmbedding(arrays["prompt"], meta["prompt_polarity"])
    return np.asarray(arrays["x"], dtype=np.float64), meta["sigma"], controls, prompt


def encode_denoise_response(eps) -> bytes:
    return binfmt.pack({"eps": eps}, {"type": "denoise_response"})


def decode_denoise_response(blob: bytes) -> np.ndarray:
    arrays, meta = binfmt.unpack(blob)
    if meta.get("type") != "denoise_response":
        raise ContractViolation("payload is not a denoise response")
    return np.asarray(arrays["eps"], dtype=np.float64)


class RemoteDenoiser:
    """Denoiser reached through ``transport(request_bytes) -> response_bytes``."""

    def __init__(self, transport: Callable[[bytes], bytes], shareable: bool = False):
        self.transport = transport
        self.shareable = shareable

    def __call__(self, x, sigma, controls, prompt):
        return decode_denoise_response(self.transport(encode_denoise_request(x, sigma, controls, prompt)))


def serve_denoise(denoiser: DenoiserAdapter, request: bytes) -> bytes:
    """Server-side half of :class:`RemoteDenoiser`."""
    x, sigma, controls, prompt = decode_denoise_request(request)
    return encode_denoise_response(denoiser(x, sigma, controls, prompt))
