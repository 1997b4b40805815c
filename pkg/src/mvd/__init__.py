"""Multi-view consistency-guided diffusion sampling engine."""

__version__ = "0.1.0"
