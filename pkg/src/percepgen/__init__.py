"""Text-guided single-pass multitask perceptual image translation."""

__version__ = "0.1.0"
