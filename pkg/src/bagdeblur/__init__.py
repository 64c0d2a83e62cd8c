"""Blind non-uniform motion deblurring with a blur-attention generator,
Wasserstein patch critic, and perceptual content loss.
"""

__version__ = "0.1.0"

from .blocks import (BlurAttentionModule, DenseBlockUnit, ResidualChain,
                     SpatialAttentionUnit)
from .data import (DatasetIndex, ImageSample, KernelSpec, NoiseSpec,
                   denormalize, load_index, normalize, random_crop_pair,
                   synthesize_blur)
from .evaluation import MetricsReport, evaluate_checkpoint, psnr, ssim
from .losses import (FeatureExtractor, LossConfig, critic_loss,
                     generator_adv_loss, gradient_penalty, joint_loss,
                     perceptual_loss)
from .networks import Generator, PatchCritic
from .render import RenderSpec, render_attention
from .training import (LossRecord, TrainConfig, TrainState, load_checkpoint,
                       lr_schedule, make_state, save_checkpoint,
                       snapshot_attention, train, training_step)
from .variants import PRESETS, VariantSpec, build_variant, run_ablation

__all__ = [
    "BlurAttentionModule", "DenseBlockUnit", "ResidualChain",
    "SpatialAttentionUnit", "DatasetIndex", "ImageSample", "KernelSpec",
    "NoiseSpec", "denormalize", "load_index", "normalize", "random_crop_pair",
    "synthesize_blur", "MetricsReport", "evaluate_checkpoint", "psnr", "ssim",
    "FeatureExtractor", "LossConfig", "critic_loss", "generator_adv_loss",
    "gradient_penalty", "joint_loss", "perceptual_loss", "Generator",
    "PatchCritic", "RenderSpec", "render_attention", "LossRecord",
    "TrainConfig", "TrainState", "load_checkpoint", "lr_schedule",
    "make_state", "save_checkpoint", "snapshot_attention", "train",
    "training_step", "PRESETS", "VariantSpec", "build_variant", "run_ablation",
]
