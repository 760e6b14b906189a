"""Port-Hamiltonian neural networks for nonlinear system identification,
initialized from a linear port-Hamiltonian estimate."""

__version__ = "0.1.0"
