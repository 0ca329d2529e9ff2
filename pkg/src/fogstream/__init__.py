"""Edge/fog/cloud pipeline for transit GPS streams."""

__version__ = "0.1.0"
