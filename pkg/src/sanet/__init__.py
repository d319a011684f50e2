"""Frozen-to-permanent histology translation with a nuclei-segmented second training pass."""

__version__ = "0.1.0"
