"""Cross-shape attention for point-cloud part segmentation, on a small numpy autodiff engine."""

__version__ = "0.1.0"
