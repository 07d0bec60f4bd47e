"""Multimodal T2DM screening from ICU EHR time series, chest radiographs and ECGs."""

__version__ = "0.1.0"
