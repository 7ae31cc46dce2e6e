"""Uncertainty-aware image classification with Monte-Carlo dropout,
per-class referral thresholds and Deep Taylor heatmaps."""

__version__ = "0.1.0"
