"""Desk-scale active-learning + semi-supervised co-training segmentation pipeline."""

__version__ = "0.1.0"
