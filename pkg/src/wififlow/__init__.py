"""Mining building-level day trajectories from passive Wi-Fi probe logs."""

__version__ = "0.1.0"
