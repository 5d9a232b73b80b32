"""Collaborative 3D semantic occupancy prediction with sparse semantic
Gaussian primitives as the inter-agent communication medium."""

from gsfusion.core import (
    EMPTY_CLASS,
    NUM_CLASSES,
    GaussianSet,
    GridGeometry,
    RigidTransform,
    Roi,
    SemanticGaussian,
    VoxelGrid,
)

__version__ = "0.1.0"

__all__ = [
    "EMPTY_CLASS",
    "NUM_CLASSES",
    "GaussianSet",
    "GridGeometry",
    "RigidTransform",
    "Roi",
    "SemanticGaussian",
    "VoxelGrid",
    "__version__",
]
