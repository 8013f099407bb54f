"""Desk-scale depth-map multimodal pipeline: scenes, benchmark, encoder, LM alignment."""

__version__ = "0.1.0"
