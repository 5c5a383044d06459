"""Training, attacking and defending small convnets on pixel-subsampled images."""

__version__ = "0.1.0"
