"""Laboratory for measuring online invariance in convolutional networks."""

__version__ = "0.1.0"
