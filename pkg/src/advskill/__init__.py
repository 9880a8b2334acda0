"""Latent skill pre-training with adversarial imitation, and skill reuse for downstream tasks."""

__version__ = "0.1.0"
