"""
Round winner prediction from per-frame damage percentages.

Exposes the error base class and document models for convenience in tests
and scripts; everything else is imported from its module.
"""

from . import models
from .errors import RoundcastError

__all__ = ["RoundcastError", "models"]
