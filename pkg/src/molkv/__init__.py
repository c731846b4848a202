"""Lookup key-value expert models: training, reparameterization, decoding."""

from .config import ConfigError, ModelConfig, published_config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ConfigError", "published_config", "__version__"]
