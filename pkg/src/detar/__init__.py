"""Decoupled rigid point-cloud registration: drift-based translation, classified correspondences for rotation."""
from .geom import RigidTransform
from .data import CorrespondenceSet, GenSpec
from .nn import DetarConfig, DetarNet

__all__ = ["RigidTransform", "CorrespondenceSet", "GenSpec", "DetarConfig", "DetarNet"]
__version__ = "0.1.0"
