"""Memristor non-ideality profiling, Bayesian optimisation and certified
multinomial noise injection for small dense networks."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DomainError,
    InputError,
    MemrobustError,
    NumericalError,
)

__all__ = ["__version__", "MemrobustError", "InputError", "DomainError", "NumericalError"]
