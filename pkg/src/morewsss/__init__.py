"""Class-token localization maps for weakly supervised segmentation, on a
numpy autodiff tape with a tiny transformer and synthetic shapes."""

__version__ = "0.1.0"
