"""Cross-fitted doubly robust estimation of path-specific effects with two mediator blocks."""

__version__ = "0.1.0"
