"""Incremental LSTM dialog state tracking on DSTC2."""

__version__ = "0.1.0"
