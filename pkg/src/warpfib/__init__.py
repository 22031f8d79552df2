"""Physics-informed deformable registration with fiber-stretch regularization."""

__version__ = "0.1.0"
