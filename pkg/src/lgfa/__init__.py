"""Localization-guided foreground augmentation over class-labeled 2D polylines."""

__version__ = "0.1.0"
