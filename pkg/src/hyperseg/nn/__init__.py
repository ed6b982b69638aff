from .model import (HyperspectralViT, ModelConfig, b0_config, bottleneck_ratio,
                    canonical_variant)
from .tensor import Tensor, no_grad
from .train import (Adam, Sample, TrainConfig, TrainResult, WeightedSampler,
                    adam_step, bce_loss, fit_input_stats, infer,
                    samples_from_tiles, train, weighted_sampler)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "HyperspectralViT", "ModelConfig", "Sample", "Tensor", "TrainConfig",
    "TrainResult", "WeightedSampler", "adam_step", "b0_config", "bce_loss",
    "bottleneck_ratio", "canonical_variant", "infer", "load_checkpoint",
    "no_grad", "samples_from_tiles", "save_checkpoint", "train",
    "weighted_sampler",
]
