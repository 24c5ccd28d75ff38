"""Ecological intensification and connectivity planning on agricultural landscapes."""

__version__ = "0.1.0"
