"""Launchers for the acceptance suite."""
