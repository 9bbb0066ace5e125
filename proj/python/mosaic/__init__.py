"""Outlier-guided pruning for small decoder language models."""

from ._mosaic import *  # noqa: F401,F403
from ._mosaic import __doc__  # noqa: F401

__version__ = "0.1.0"
