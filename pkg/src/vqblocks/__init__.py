"""Two-stage vector-quantized image generation at desk scale.

Stage 1: a windowed local-attention autoencoder around a discrete codebook.
Stage 2: a masked token transformer over pooled global + halo-local context,
sampled block by block with in-block parallel decoding.
"""

from .autoencoder import AeConfig, LocalAutoencoder, receptive_radius
from .blockattn import BlockPlan, PriorConfig, TokenTransformer, gather_local, make_block_plan, seq_len
from .quantize import Codebook, codebook_usage, quantize, vq_loss
from .sampling import InfillSpec, SampleConfig, in_block_schedule, infill, sample_block, sample_image
from .tensor import Rng, Tensor, grad_check, no_grad
from .training import (
    Adam,
    TrainConfig,
    mask_fraction,
    sample_block_mask,
    sample_token_mask,
    train_step_stage1,
    train_step_stage2,
)

__all__ = [
    "AeConfig", "LocalAutoencoder", "receptive_radius",
    "BlockPlan", "PriorConfig", "TokenTransformer", "gather_local", "make_block_plan", "seq_len",
    "Codebook", "codebook_usage", "quantize", "vq_loss",
    "InfillSpec", "SampleConfig", "in_block_schedule", "infill", "sample_block", "sample_image",
    "Rng", "Tensor", "grad_check", "no_grad",
    "Adam", "TrainConfig", "mask_fraction", "sample_block_mask", "sample_token_mask",
    "train_step_stage1", "train_step_stage2",
]
