"""Physics-based non-rigid registration of deformable volumes."""

__version__ = "0.1.0"
