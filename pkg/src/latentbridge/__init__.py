"""Desk-scale latent-diffusion engine for long image-to-image translation.

Pieces: a numpy-backed tensor core with hand-rolled reverse-mode autodiff,
noise schedules with fractional forward encoding, a latent autoencoder,
a condition-guided denoising UNet, deterministic DDIM sampling/inversion
with classifier-free guidance, a procedurally generated and analytically
verifiable skeleton-to-creature task, and the FID/KID/top-1 evaluation
protocol.
"""

from .codec import Codec, CodecConfig, train_codec
from .data import DatasetManifest, ImageSet, gen_toy_dataset, load_manifest, load_split
from .denoiser import Denoiser, DenoiserConfig, Vocabulary, train_denoiser
from .metrics import Classifier, ClassifierConfig, MetricsReport, fid, kid, top1_scores, train_classifier
from .numerics import GradTape, Tensor, adam_step, backward, grad_check
from .pipeline import TranslationConfig, TranslationModels, run_sweep, translate
from .sampler import SamplerConfig, cfg_combine, ddim_invert, ddim_step, reverse
from .schedule import NoiseSchedule, forward_diffuse, make_schedule, step_from_fraction

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "adam_step",
    "grad_check",
    "NoiseSchedule",
    "make_schedule",
    "step_from_fraction",
    "forward_diffuse",
    "Codec",
    "CodecConfig",
    "train_codec",
    "Denoiser",
    "DenoiserConfig",
    "Vocabulary",
    "train_denoiser",
    "SamplerConfig",
    "cfg_combine",
    "ddim_step",
    "reverse",
    "ddim_invert",
    "TranslationConfig",
    "TranslationModels",
    "translate",
    "run_sweep",
    "Classifier",
    "ClassifierConfig",
    "train_classifier",
    "top1_scores",
    "fid",
    "kid",
    "MetricsReport",
    "DatasetManifest",
    "ImageSet",
    "gen_toy_dataset",
    "load_manifest",
    "load_split",
    "__version__",
]
