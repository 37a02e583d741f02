"""Bayesian optimization with crash constraints."""
