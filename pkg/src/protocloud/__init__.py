"""Graph property prediction with prototype point clouds and transport readouts."""

__version__ = "0.1.0"
