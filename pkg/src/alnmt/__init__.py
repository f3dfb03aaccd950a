"""alnmt: a small translation engine with a pool-based active-learning loop."""

__version__ = "0.1.0"
