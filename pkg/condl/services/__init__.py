"""Service layer for the condl pipeline."""

__all__ = [
    "analytics",
    "checkpoint",
    "dataset",
    "evaluation",
    "files",
    "geometry",
    "matching",
    "model",
    "synthgen",
    "trainer",
]
