"""Guidance weight algebra and per-step noise combination.

The sampler combines three denoiser predictions each step::

    eps = w0 * eps(x | identity latent, p+)
        + w1 * eps(x | spatial controls, p-)
        + w2 * eps(x | spatial controls, p+)

with ``w0 = 1 - a_s``, ``w1 = min(a_s, 1) * (1 - omega)`` and ``w2`` piecewise
in ``a_s``. The three weights always sum to one, so ``a_s = 0`` reconstructs
the input and ``a_s = 1`` is ordinary classifier-free guidance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DomainError

CONTROL_KINDS = (
    "depth",
    "normal",
    "segmentation",
    "pose",
    "lineart",
    "identity_latent",
    "attribute_map",
)
SPATIAL_KINDS = ("depth", "normal", "segmentation", "pose", "lineart")

# (weight, cutoff_fraction)
DEFAULT_CONTROL_SETTINGS = {
    "depth": (0.5, 1.0),
    "normal": (0.3, 1.0),
    "segmentation": (0.3, 1.0),
    "pose": (0.4, 1.0),
    "lineart": (0.5, 0.5),
}
DEFAULT_OMEGA = 7.5


@dataclass(frozen=True)
class GuidanceWeights:
    a_s: float
    omega: float
    w0: float
    w1: float
    w2: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w0, self.w1, self.w2)


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """One conditioning input with its strength and step cutoff.

    ``tensor`` is stored read-only; ``weight`` and ``cutoff_fraction`` cannot be
    changed after construction.
    """

    kind: str
    tensor: np.ndarray = field(repr=False)
    weight: float = 1.0
    cutoff_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise ContractViolation(f"unknown control kind {self.kind!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise DomainError(f"control weight must lie in [0, 1], got {self.weight}")
        if not 0.0 < self.cutoff_fraction <= 1.0:
            raise DomainError(f"cutoff_fraction must lie in (0, 1], got {self.cutoff_fraction}")
        arr = np.array(self.tensor, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "tensor", arr)


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    tokens: np.ndarray = field(repr=False)
    polarity: str = "positive"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ContractViolation(f"polarity must be positive or negative, got {self.polarity!r}")
        arr = np.array(self.tokens, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractViolation("prompt tokens must form a (count, dim) array")
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]


def compute_guidance_weights(a_s: float, omega: float = DEFAULT_OMEGA) -> GuidanceWeights:
    """Return the three combination weights for anonymization scale ``a_s``.

    ``a_s = 0`` falls in the lower branch, giving ``w2 = 0`` (the continuous
    extension of ``a_s * omega``).

    >>> compute_guidance_weights(1.25, 7.5).as_tuple()
    (-0.25, -6.5, 7.75)
    """
    a_s = float(a_s)
    omega = float(omega)
    if not math.isfinite(a_s) or a_s < 0:
        raise DomainError(f"anonymization scale must be >= 0, got {a_s}")
    if not math.isfinite(omega) or omega <= 0:
        raise DomainError(f"guidance scale must be > 0, got {omega}")
    w0 = 1.0 - a_s
    w1 = min(a_s, 1.0) * (1.0 - omega) + 0.0  # no negative zero
    w2 = a_s * omega if a_s < 1.0 else a_s - 1.0 + omega
    return GuidanceWeights(a_s=a_s, omega=omega, w0=w0, w1=w1, w2=w2)


def combine_noise_predictions(weights: GuidanceWeights, eps_identity, eps_negative, eps_positive):
    """Weighted sum of the three slot predictions.

    A slot whose weight is exactly zero may be passed as ``None``; the sampler
    skips querying the denoiser for it.
    """
    terms = [(weights.w0, eps_identity), (weights.w1, eps_negative), (weights.w2, eps_positive)]
    shape = None
    for w, eps in terms:
        if eps is None:
            if w != 0.0:
                raise ContractViolation("missing prediction for a slot with nonzero weight")
            continue
        s = np.shape(eps)
        if shape is not None and s != shape:
            raise ContractViolation(f"noise prediction shapes differ: {shape} vs {s}")
        shape = s
    if shape is None:
        raise ContractViolation("no noise predictions supplied")
    out = np.zeros(shape)
    for w, eps in terms:
        if eps is not None and w != 0.0:
            out = out + w * np.asarray(eps, dtype=np.float64)
    return out if out.ndim else float(out)


def effective_control_weight(control: ControlSignal, step_index: int, total_steps: int) -> float:
    """Weight of ``control`` at ``step_index``: active strictly below floor(cutoff * total)."""
    if total_steps <= 0:
        raise ContractViolation("total_steps must be positive")
    if not 0 <= step_index < total_steps:
        raise ContractViolation(f"step_index {step_index} outside [0, {total_steps})")
    if step_index < math.floor(control.cutoff_fraction * total_steps):
        return control.weight
    return 0.0
