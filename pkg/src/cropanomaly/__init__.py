"""Parcel-level crop anomaly detection from Sentinel-1/2 style time series."""

from __future__ import annotations

__version__ = "0.1.0"
