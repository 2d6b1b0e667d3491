"""Evolved feature-partition ensembles of autoencoders for anomaly detection."""

__version__ = "0.1.0"
