"""Two-stage adaptive D-optimal designs for sigmoid Emax dose finding."""

__version__ = "0.1.0"
