"""Reality-gap analysis for a truss-bridge digital twin."""

__version__ = "0.1.0"
