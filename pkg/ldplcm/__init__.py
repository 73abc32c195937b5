"""Two-phase locally differentially private frequency estimation with a learned frequency model."""

__version__ = "0.1.0"
