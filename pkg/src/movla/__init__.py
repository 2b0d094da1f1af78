"""Desk-scale vision-language-action stack with latent-motion supervision."""

__version__ = "0.1.0"
