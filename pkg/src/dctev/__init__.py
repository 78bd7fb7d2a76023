"""EV charging event prediction from smart-meter load with a patch transformer."""

__version__ = "0.1.0"
