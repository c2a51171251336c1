"""Categorical cross-modal latent space for audio-driven face mesh animation."""

__version__ = "0.1.0"
