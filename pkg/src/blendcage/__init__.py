"""Example-driven volumetric modeling with corrective blend fields on a tet cage."""

__version__ = "0.1.0"
