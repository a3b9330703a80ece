"""Open-vocabulary Gaussian feature fields for language-guided grasping."""

__version__ = "1.0.0"
