"""Domain-adapted aspect-target sentiment classification at desk scale."""

__version__ = "0.1.0"
