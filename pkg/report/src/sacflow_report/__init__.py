"""Rendering of learning curves and gradient-norm bar charts from run CSVs."""

__version__ = "0.1.0"
