"""Synthetic-data-for-recognition pipeline on a procedural toy image world."""

__version__ = "0.1.0"

from . import dataengine, diffusion, dualencoder, nn, numcore, pipeline, trainer  # noqa: F401
