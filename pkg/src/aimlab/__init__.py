"""Attentive independent mechanisms for fast/slow meta-learning, on a small numpy autodiff."""

__version__ = "0.1.0"
