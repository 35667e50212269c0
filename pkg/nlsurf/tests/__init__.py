"""Tests for the nlsurf package."""
