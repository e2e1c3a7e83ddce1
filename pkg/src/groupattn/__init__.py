"""Group attention for timeseries transformers."""

__version__ = "0.1.0"
