"""Example-guided scene synthesis with masked spatial-channel attention."""

__version__ = "0.1.0"
