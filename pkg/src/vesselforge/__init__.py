"""Synthetic 3D vessel data engine: domain randomisation, conditional flow matching, clDice."""

__version__ = "0.1.0"
