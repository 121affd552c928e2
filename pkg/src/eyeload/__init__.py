"""Joint eye detection, sub-pixel landmark regression, tracking and load estimation."""

__version__ = "0.1.0"
