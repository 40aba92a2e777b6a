"""Projection Regret: diffusion-based novelty detection at desk scale."""

__version__ = "0.3.0"
