"""Neural-network optimal control for continuous families of quantum gates."""

__version__ = "0.1.0"
