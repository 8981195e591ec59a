"""Saliency-guided CutSwap augmentation and memory-bank anomaly detection."""

__version__ = "0.1.0"
