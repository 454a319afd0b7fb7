"""Dissipative excitation transfer between two qubits along quantum trajectories."""

__version__ = "0.1.0"
