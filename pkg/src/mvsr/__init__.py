"""Multi-view depth prediction with a volumetric scene model and iterative refinement."""

__version__ = "0.1.0"
