"""Multi-stream image quality regression with spatial and channel attention.

Self-contained: a small reverse-mode autodiff core, attention blocks, a
two-stream fusion model, the combined MAE + correlation training loss,
rank-correlation evaluation metrics, and gradient-based heatmap attribution.
"""

__version__ = "0.1.0"
