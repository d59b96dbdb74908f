"""Binarized memristive CNN simulation: training, crossbar mapping, variation and K tuning."""

__version__ = "0.1.0"
