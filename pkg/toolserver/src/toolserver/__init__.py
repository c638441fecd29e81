"""Fixture playback server for the tool inference wire protocol."""

from .server import FailurePlan, serve
from .store import FixtureError, FixtureStore

__all__ = ["FailurePlan", "FixtureError", "FixtureStore", "serve"]
