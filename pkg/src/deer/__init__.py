"""DEER: software-generated metadata for deep runahead instruction prefetching."""

__version__ = "0.1.0"
