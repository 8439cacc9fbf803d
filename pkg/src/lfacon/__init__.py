"""No-reference quality assessment for light-field images."""

__version__ = "0.1.0"
