"""In-memory key-value cache server with selectable threading models."""

from .datastore import Store
from .engine import ModelConfig, ModelKind, Server, build_topology, serve
from .protocol import Op, RequestFrame, ResponseFrame, Status

__all__ = [
    "ModelConfig", "ModelKind", "Op", "RequestFrame", "ResponseFrame", "Server",
    "Status", "Store", "build_topology", "serve",
]
__version__ = "0.1.0"
