"""Desk-scale MedVSR: cross state-space propagation video super-resolution."""
