"""Confocal time-of-flight diffuse optical tomography toolkit.

Simulation (Monte Carlo and diffusion-theory forward models), fast
convolutional reconstruction with FISTA, Hadamard source multiplexing,
and SPAD-style noise modeling for scattering-slab geometries.
"""

from .core_types import (C0_MM_PER_PS, FluorophoreModel, OpticalProperties,
                         ScanConfig, SlabMedium, TimeAxis, TransientSet,
                         VolumeImage, VoxelGrid, speed_in_medium, validate_scene)
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "C0_MM_PER_PS",
    "FluorophoreModel",
    "OpticalProperties",
    "RngStream",
    "ScanConfig",
    "SlabMedium",
    "TimeAxis",
    "TransientSet",
    "VolumeImage",
    "VoxelGrid",
    "speed_in_medium",
    "validate_scene",
    "__version__",
]
