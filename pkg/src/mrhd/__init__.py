"""Joint moment retrieval and highlight detection on a tiny autodiff engine."""

__version__ = "0.1.0"
