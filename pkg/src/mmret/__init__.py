"""Desk-scale universal multimodal retrieval training recipe."""

__version__ = "0.1.0"
