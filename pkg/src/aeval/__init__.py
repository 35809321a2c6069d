"""Automated evaluation of research software artifacts."""

from .graph import AEGraph, Edge, ExecStatus, Node, deserialize
from .errors import AevalError

__version__ = "0.1.0"

__all__ = ["AEGraph", "Edge", "ExecStatus", "Node", "deserialize", "AevalError", "__version__"]
