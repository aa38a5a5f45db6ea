"""Hybrid recurrent/attention language models on a minimal numpy autodiff tape."""

__version__ = "0.1.0"
