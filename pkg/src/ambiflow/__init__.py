"""ambiflow: conditional normalizing flow lab for multi-hypothesis 3D pose
distributions, trained and evaluated entirely on synthetic scenes."""

__version__ = "0.1.0"
