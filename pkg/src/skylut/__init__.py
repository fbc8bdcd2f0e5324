"""Precomputed multiple-scattering sky tables and a CPU planet renderer."""

__version__ = "0.1.0"

from .config import AtmosphereModel, ConfigError, list_presets, load_config, load_preset
from .optics import Ray, ShellGeometry
from .spectra import DomainError, SpectralTriple

__all__ = [
    "AtmosphereModel",
    "ConfigError",
    "DomainError",
    "Ray",
    "ShellGeometry",
    "SpectralTriple",
    "list_presets",
    "load_config",
    "load_preset",
    "__version__",
]
