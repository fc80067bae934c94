"""Point-based multi-view stereo: coarse cost-volume depth refined by point flow."""

__version__ = "0.1.0"
