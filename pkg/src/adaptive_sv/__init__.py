"""Speaker-verification evaluation and context-adaptive thresholding."""

__version__ = "0.1.0"
