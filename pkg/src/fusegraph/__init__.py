"""Static graph optimizer and CPU micro-runtime for transformer/conformer speech models."""

__version__ = "0.1.0"
