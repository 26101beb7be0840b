"""Deep supervision with intermediate concepts at desk scale."""

__version__ = "0.1.0"
