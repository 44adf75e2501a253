"""MIT-BIH heartbeat classification with a six-layer residual 1-D CNN."""

__version__ = "0.1.0"
