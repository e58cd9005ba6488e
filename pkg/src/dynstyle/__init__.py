"""Dynamic Gaussian-splatting stylization: renderer, losses, trainer and benchmark metrics."""

__version__ = "0.1.0"
