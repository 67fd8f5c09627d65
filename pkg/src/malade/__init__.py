"""Agent/critic pipeline for labelling drug-category effects on clinical outcomes."""

__version__ = "0.1.0"
