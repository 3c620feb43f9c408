"""Simulation of wideband XL-array channel estimation and RIS-assisted localization."""

from rissense.geometry import (
    ArrayGeometry,
    SubcarrierGrid,
    SPEED_OF_LIGHT,
    classical_rayleigh,
    effective_rayleigh,
    far_steering,
    near_steering,
    squint_shift,
)

__all__ = [
    "ArrayGeometry",
    "SubcarrierGrid",
    "SPEED_OF_LIGHT",
    "classical_rayleigh",
    "effective_rayleigh",
    "far_steering",
    "near_steering",
    "squint_shift",
]

__version__ = "0.1.0"
