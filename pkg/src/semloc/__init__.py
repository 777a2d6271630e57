"""Object-based semantic maps over floor plans and object-aware Monte Carlo localization."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
