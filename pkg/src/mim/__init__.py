"""Multi-intent attribute-aware text matching on a numpy autodiff engine."""

__version__ = "0.1.0"
