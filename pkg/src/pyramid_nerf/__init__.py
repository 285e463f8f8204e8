"""Pyramid-of-grid radiance fields for anti-aliased volumetric rendering."""

__version__ = "0.1.0"
