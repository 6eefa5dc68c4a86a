"""Random position noise augmentation for word-embedding classifiers."""

__version__ = "0.1.0"
