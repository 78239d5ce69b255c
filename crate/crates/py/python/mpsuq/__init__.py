"""Checkpoint-ensemble uncertainty for segmentation maps."""

from ._mpsuq import *  # noqa: F401,F403
from ._mpsuq import __version__  # noqa: F401
