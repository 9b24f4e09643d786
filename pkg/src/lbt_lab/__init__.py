"""Learning-by-teaching laboratory: bilevel training of implicit generators."""

__version__ = "0.1.0"
