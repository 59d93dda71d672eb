"""HTTP adapter exposing a causal LM's next-token log-probabilities."""

__version__ = "0.1.0"

from .server import ApiError, ModelHost, ServerConfig, build_app, serve  # noqa: F401
