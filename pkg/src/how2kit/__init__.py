"""Toolkit for mining, benchmarking, judging, and rewarding goal-conditioned procedures."""

__version__ = "0.1.0"
