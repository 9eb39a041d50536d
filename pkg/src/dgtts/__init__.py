"""Few-step denoising diffusion acoustic model trained with an adversarial
denoiser, plus a synthetic corpus, objective metrics and analytic checks."""

from .config import ModelConfig, TrainConfig
from .diffusion import (
    DiffusionSchedule,
    diffuse_closed_form,
    diffuse_stepwise,
    make_variance_schedule,
    posterior_params,
    posterior_sample,
)
from .inference import InferenceRequest, denoise_chain, shallow_one_step, variation_analysis
from .metrics import mcd_dtw, rmse_dtw, ssim
from .models import AcousticGenerator, BasicAcousticModel, JCUDiscriminator, build_models
from .synthdata import CorpusSpec, generate_corpus, load_corpus, save_corpus
from .training import train_diffgan, train_stage1_basic, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "AcousticGenerator", "BasicAcousticModel", "CorpusSpec", "DiffusionSchedule", "InferenceRequest",
    "JCUDiscriminator", "ModelConfig", "TrainConfig", "build_models", "denoise_chain", "diffuse_closed_form",
    "diffuse_stepwise", "generate_corpus", "load_corpus", "make_variance_schedule", "mcd_dtw",
    "posterior_params", "posterior_sample", "rmse_dtw", "save_corpus", "shallow_one_step", "ssim",
    "train_diffgan", "train_stage1_basic", "train_two_stage", "variation_analysis",
]
