"""Experiment configuration files."""
