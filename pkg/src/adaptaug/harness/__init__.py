"""Experiment harness: configuration, runners, ablations, plots, CLI."""
