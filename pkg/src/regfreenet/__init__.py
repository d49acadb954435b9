"""Registration-free dental implant position prediction on CBCT volumes."""

from .core import BinaryMask, LandmarkTriple, SlopePair, VoxelVolume
from .network import NetworkConfig, RegFreeNet, build_model

__all__ = [
    "BinaryMask",
    "LandmarkTriple",
    "NetworkConfig",
    "RegFreeNet",
    "SlopePair",
    "VoxelVolume",
    "build_model",
]
__version__ = "0.1.0"
