"""Non-autoregressive program generation for numerical reasoning over hybrid contexts."""

__version__ = "0.1.0"
