"""Dense-descriptor / LLC / spatial-pyramid image classification toolkit."""

__version__ = "0.1.0"
