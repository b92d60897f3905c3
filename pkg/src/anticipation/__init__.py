"""Action-conditional occupancy grid prediction with ego-motion anticipation."""

__version__ = "0.1.0"
