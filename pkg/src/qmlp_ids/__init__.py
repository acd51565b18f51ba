"""Quantised-MLP intrusion detection for CAN traffic with integer-only inference."""

__version__ = "0.1.0"
