"""Manifold and conventional particle filters for contact-based configuration estimation."""

from . import filters, kinematics, manifold, scenarios, sdf
from ._core import BACKEND, use_backend

__version__ = "0.1.0"

__all__ = ["filters", "kinematics", "manifold", "scenarios", "sdf", "BACKEND", "use_backend",
           "__version__"]
