"""Text-guided image generation and manipulation via latent-code optimization
over a style-based generator, with a cycle-consistent inversion encoder and a
contrastively aligned text encoder, evaluated on a synthetic captioned-shapes
dataset."""

__version__ = "0.1.0"

from .config import TrainConfig, config_hash, load_config
from .data import AttributeSpec, DatasetConfig, ShapesDataset, Vocab, generate_dataset
from .gan import Generator, ImageDiscriminator, train_gan
from .guidedopt import OptimizationConfig, OptimizationTrace, optimize_latent
from .inversion import InversionEncoder, LatentDiscriminator, LossWeights, train_inversion
from .oracle import AttributeClassifier, train_oracle
from .textalign import TextEncoder, infonce_l2, train_alignment

__all__ = [
    "AttributeClassifier", "AttributeSpec", "DatasetConfig", "Generator",
    "ImageDiscriminator", "InversionEncoder", "LatentDiscriminator", "LossWeights",
    "OptimizationConfig", "OptimizationTrace", "ShapesDataset", "TextEncoder",
    "TrainConfig", "Vocab", "config_hash", "generate_dataset", "infonce_l2",
    "load_config", "optimize_latent", "train_alignment", "train_gan",
    "train_inversion", "train_oracle",
]
