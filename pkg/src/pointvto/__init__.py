"""Point-guided video try-on on synthetic scenes."""

__version__ = "0.1.0"
