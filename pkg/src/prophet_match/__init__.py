"""Threshold policies for prophet inequalities with correlated arrivals and
two-sided online matching."""

__version__ = "0.1.0"
