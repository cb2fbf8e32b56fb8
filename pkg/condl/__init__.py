"""Dense image matching with contrastively trained per-pixel descriptors."""

__version__ = "0.1.0"
