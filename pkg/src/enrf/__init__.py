"""Ensemble robust filtering with t-distributions."""
