"""Autoregressive video pretraining over spatiotemporal token clusters, in numpy."""

__version__ = "0.1.0"
