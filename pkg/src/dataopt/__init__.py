"""Per-point train-data optimization via implicit differentiation."""

__version__ = "0.1.0"
