"""Desk-scale laboratory for continued-pretraining dynamics under language shift."""

__version__ = "0.1.0"
