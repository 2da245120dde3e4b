"""HTTP service exposing generate, train, predict and evaluate."""
from .app import create_app

__all__ = ["create_app"]
