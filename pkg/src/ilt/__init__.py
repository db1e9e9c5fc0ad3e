"""Curvilinear inverse lithography with morphological mask regularization."""

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    ILTError,
    OutOfBoundsError,
    ValidationError,
)
from .kernels import Corner, KernelSet, ProcessCorners, load_kernel_set, save_kernel_set, synth_gaussian_kernels
from .litho import LithoConfig, aerial_image, print_corners, simulate_corners
from .metrics import EpeSpec, MetricBundle, evaluate
from .morph import cdr, closing, dilate, disc_element, erode, opening
from .objective import OptConfig, OptResult, curvy_ilt
from .raster import BinaryImage, GrayImage, GridSpec, Polygon, PolygonLayout, rasterize

__version__ = "0.1.0"

__all__ = [
    "BinaryImage",
    "ConfigError",
    "Corner",
    "DimensionError",
    "DivergenceError",
    "EpeSpec",
    "FormatError",
    "GrayImage",
    "GridSpec",
    "ILTError",
    "KernelSet",
    "LithoConfig",
    "MetricBundle",
    "OptConfig",
    "OptResult",
    "OutOfBoundsError",
    "Polygon",
    "PolygonLayout",
    "ProcessCorners",
    "ValidationError",
    "aerial_image",
    "cdr",
    "closing",
    "curvy_ilt",
    "dilate",
    "disc_element",
    "erode",
    "evaluate",
    "load_kernel_set",
    "opening",
    "print_corners",
    "rasterize",
    "save_kernel_set",
    "simulate_corners",
    "synth_gaussian_kernels",
]
