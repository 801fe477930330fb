"""HTTP service wrapping the tracking toolkit."""

from .app import create_app

__all__ = ["create_app"]
