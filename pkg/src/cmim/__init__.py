"""Cross-modal mutual-information maximisation for modality-robust models."""

__version__ = "0.1.0"

from .estimators import CMIMClassifier, CMIMSegmenter

__all__ = ["CMIMClassifier", "CMIMSegmenter"]
