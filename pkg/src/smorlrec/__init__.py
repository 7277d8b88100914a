"""Session-based recommendation with a scalarized multi-objective Q-learning regularizer."""

__version__ = "0.1.0"
