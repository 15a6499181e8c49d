"""wwlab: spectral laboratory for 1D infinite-depth gravity water waves."""

__version__ = "0.1.0"
