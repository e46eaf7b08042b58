"""Multi-dataset point-cloud segmentation with domain prompts."""

__version__ = "0.1.0"
