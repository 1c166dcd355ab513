"""Guided-backprop and occlusion attribution for a toy VQA model."""

__version__ = "0.1.0"
