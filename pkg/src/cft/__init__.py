"""Attention-concentration analytics and heatmap-to-box tooling on synthetic worlds."""

__version__ = "0.1.0"
