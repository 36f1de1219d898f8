"""Visual keyword spotting with text queries and a zero-shot keyword encoder."""

__version__ = "0.1.0"
