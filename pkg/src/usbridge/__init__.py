"""Unbalanced Schroedinger bridges for diffusions with killing."""
