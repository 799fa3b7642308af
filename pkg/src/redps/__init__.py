"""redps: redundancy-d processor-sharing simulation and fluid-model toolkit."""

__version__ = "0.1.0"
