"""Phase-field topology optimisation of elastic eigenvalues on a structured 2D mesh."""

__version__ = "0.1.0"
