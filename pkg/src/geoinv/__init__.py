"""Two-level neural-network joint inversion of gravity and magnetic fields."""

__version__ = "0.1.0"
