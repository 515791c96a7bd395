"""Next-location recommendation with spatio-temporal self-attention over check-in trajectories."""

__version__ = "0.1.0"
