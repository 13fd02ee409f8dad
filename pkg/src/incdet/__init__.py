"""Incremental object detection with a vision-language text-embedding head."""

__version__ = "0.1.0"
