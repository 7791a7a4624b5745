"""Cross-view LiDAR 3D object detection on a small numpy autodiff core."""
__version__ = "0.1.0"
