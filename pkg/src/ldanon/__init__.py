"""Latent-diffusion image anonymization with identity-repelling guidance.

Two flows: ``base`` (multi-control guidance with the source latent as a
negative control) and ``light`` (per-face attribute maps plus identity swap),
and the evaluation metrics used to judge them.
"""
from .diffusion import karras_sigma_schedule, sample, toy_autoencoder, toy_denoiser
from .guidance import (
    ControlSignal,
    GuidanceWeights,
    PromptEmbedding,
    combine_noise_predictions,
    compute_guidance_weights,
    effective_control_weight,
)
from .pipeline import PipelineConfig, anonymize_base, anonymize_light, run_batch, toy_adapters

__version__ = "0.1.0"
