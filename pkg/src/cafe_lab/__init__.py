"""cafe-lab: vertical federated learning simulator and gradient-leakage lab."""

__version__ = "0.1.0"

from .kernels import ACTIVE_BACKEND

__all__ = ["ACTIVE_BACKEND", "__version__"]
