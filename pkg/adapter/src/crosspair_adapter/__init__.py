"""Model-serving adapter for the crosspair inference wire protocol."""

__version__ = "0.1.0"
