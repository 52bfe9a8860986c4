"""Budgeted nearest-neighbor search over NSW graphs with learned routing."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
