"""Latent-diffusion inpainting on a procedural image corpus, plus a
perturbation engine that protects images against inpainting edits."""

from .attack import OBJECTIVES, STAGES, AttackConfig, ProtectionResult, protect
from .dataset import gen_dataset, load_dataset, prompt_tokens
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    ddim_step,
    forward_diffuse,
    inpaint_sample,
)
from .errors import (
    AttackError,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    TrainingError,
)
from .experiment import ExperimentPlan, plan_from_json, run_experiment
from .masks import Box, MaskSpec, box_to_mask, classify_hole, random_shift_mask
from .metrics import (
    attention_divergence,
    attention_pca_map,
    gaussian_purify,
    hole_deviation,
    psnr,
)
from .tensor import Tensor, gradient_check
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackError", "Box", "CheckpointError", "ConfigError",
    "ContractError", "Denoiser", "DenoiserConfig", "DimensionError",
    "ExperimentPlan", "MaskSpec", "NoiseSchedule", "NumericError",
    "OBJECTIVES", "ProtectionResult", "STAGES", "SamplerConfig", "Tensor",
    "TrainConfig", "TrainingError", "attention_divergence",
    "attention_pca_map", "box_to_mask", "classify_hole", "ddim_step",
    "decode", "encode", "forward_diffuse", "gaussian_purify", "gen_dataset",
    "gradient_check", "hole_deviation", "inpaint_sample", "load_checkpoint",
    "load_dataset", "plan_from_json", "prompt_tokens", "protect", "psnr",
    "random_shift_mask", "run_experiment", "save_checkpoint", "train",
]
