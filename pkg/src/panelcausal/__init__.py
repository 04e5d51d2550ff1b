"""Panel-data causal inference toolkit for residual-based disclosure-decoupling studies."""

__version__ = "0.1.0"
