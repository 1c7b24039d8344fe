"""Volume I/O, connectomes, a small autodiff engine and the classifiers built on it."""

__version__ = "0.1.0"
