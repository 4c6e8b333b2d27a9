"""Self-supervised face reenactment toolkit."""

__version__ = "0.1.0"
