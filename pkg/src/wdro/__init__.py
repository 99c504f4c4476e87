"""Wasserstein distributional attacks, first-order sensitivity bounds and robust training.

Kept import-free so the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
