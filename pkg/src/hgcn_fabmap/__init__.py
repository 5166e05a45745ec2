"""Loop-closure detection: hyperbolic graph clustering for the visual vocabulary
and a Chow-Liu / inverted-index place recogniser on top of it."""

__version__ = "0.1.0"
