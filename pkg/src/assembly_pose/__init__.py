"""Two-stage, symmetry-aware planar pose estimation and assembly simulation."""

__version__ = "0.1.0"
