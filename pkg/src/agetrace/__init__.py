"""Age-tracing training for semantic segmentation of sequential historical maps."""

__version__ = "0.1.0"
