"""Scott-Vogelius finite elements for the 2D p-Stokes problem, with
inf-sup and projection-stability diagnostics."""

__version__ = "0.1.0"
