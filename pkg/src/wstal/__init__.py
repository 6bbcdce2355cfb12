"""Weakly-supervised temporal action localization pipeline with a synthetic oracle harness."""

__version__ = "0.1.0"
