"""Continual-learning experiment framework with language-guided frozen
classifier supervision, vanilla trainable heads, and desk-scale baselines."""

from . import clmethods, metrics, numcore, runner, supervision, taskstream

__version__ = "0.1.0"

__all__ = ["clmethods", "metrics", "numcore", "runner", "supervision",
           "taskstream", "__version__"]
