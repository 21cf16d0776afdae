"""Radar hit-distribution prediction, radial matching and range refinement for radar-camera fusion."""

__version__ = "0.1.0"
