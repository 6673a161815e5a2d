"""Margin dynamics toolkit for bias-free homogeneous classifiers."""

__version__ = "0.1.0"
