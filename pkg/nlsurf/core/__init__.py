"""Core modules: settings, errors and the computation engine."""
