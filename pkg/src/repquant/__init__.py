"""Convolutional representation codec with EMA vector quantization.

Turns continuous frame-level features into discrete token streams, alongside a
k-means baseline and n-gram phone-purity metrics for comparing the two.
"""

__version__ = "0.1.0"
