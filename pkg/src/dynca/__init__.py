"""Dynamic texture synthesis with neural cellular automata."""

__version__ = "0.1.0"
