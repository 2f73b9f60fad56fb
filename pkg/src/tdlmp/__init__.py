"""Day-ahead DER co-optimization and DLMP analysis on radial feeders."""

__version__ = "0.1.0"
