"""Datacube segmentation by deep spectral clustering.

An autoencoder embeds per-pixel spectra into a low-dimensional latent
space, an iterative K-Means picks the number of clusters by silhouette,
and the decoder maps cluster barycenters back to spectra.
"""

from sdcn.errors import (
    ChecksumError,
    ConfigError,
    DataError,
    DegenerateInputError,
    FormatError,
    InvalidArchitectureError,
    InvalidDimensionError,
    PoisonedStateError,
    SdcnError,
    ShapeError,
    StateError,
    TruncatedFileError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "FormatError",
    "InvalidArchitectureError",
    "InvalidDimensionError",
    "PoisonedStateError",
    "SdcnError",
    "ShapeError",
    "StateError",
    "TruncatedFileError",
    "VersionError",
]
