"""Multi-condition rectified-flow transformer toolkit for material transfer."""

__version__ = "0.1.0"
