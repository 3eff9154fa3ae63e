"""Selective-region dehazing cascade: fog synthesis, micro dehazers, grid detectors and metrics."""

__version__ = "0.1.0"

CLASS_NAMES = ("circle", "square", "triangle")
