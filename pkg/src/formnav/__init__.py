"""Formation path planning on fast-marching fields, with a deterministic simulator."""

__version__ = "0.1.0"
