"""Incremental reconstruction of a chain of local voxel radiance fields
with jointly estimated camera poses."""

__version__ = "0.1.0"

from .errors import EngineError  # noqa: F401
