"""Progressive level-of-detail 3D brain segmentation with a synthetic multi-site phantom suite."""

__version__ = "0.1.0"
