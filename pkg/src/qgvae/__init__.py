"""Quantised global autoencoder: globally supported image tokens via a channel/feature transpose."""
from .config import ModelConfig, RunConfig, TrainConfig, load_config, preset
from .model import GridVQVAE, QGVAE, build_model

__all__ = ["ModelConfig", "TrainConfig", "RunConfig", "load_config", "preset",
           "QGVAE", "GridVQVAE", "build_model"]
__version__ = "0.1.0"
