"""Batch command-line application."""
