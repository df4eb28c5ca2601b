"""Causal joint personalised speech enhancement and acoustic echo cancellation."""
__version__ = "0.1.0"
