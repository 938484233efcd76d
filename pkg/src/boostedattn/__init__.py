"""Gradient-boosted attention and its rivals, built on a small numpy autodiff."""

__version__ = "0.1.0"
