"""Lane-level differential variable speed limit control on a merge bottleneck."""

__version__ = "0.1.0"
