"""CDA-Uzawa and companion nonlinear solvers for the steady 2D Navier-Stokes equations."""

__version__ = "0.1.0"
