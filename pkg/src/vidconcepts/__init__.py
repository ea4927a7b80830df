"""Static/dynamic concept learning for self-supervised video representations."""

__version__ = "0.1.0"
