"""Conditional random fields on a simulated quantum register."""
