"""Ghost model for prescient continual learning, at desk scale."""

__version__ = "0.1.0"
