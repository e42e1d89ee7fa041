"""Dual-species Rydberg quantum cellular automata: ideal and physical engines plus analysis."""

__version__ = "0.1.0"
