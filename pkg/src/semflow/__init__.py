"""Dense semantic correspondence with exemplar LDA unaries."""

__version__ = "0.1.0"
