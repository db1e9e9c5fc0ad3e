"""Small self-contained problems used by the regression suite and the docs."""

from __future__ import annotations

from typing import NamedTuple

from .kernels import synth_gaussian_kernels
from .litho import LithoConfig
from .objective import OptConfig
from .raster import BinaryImage, GridSpec, Polygon, PolygonLayout, rasterize


class Problem(NamedTuple):
    layout: PolygonLayout
    target: BinaryImage
    opt: OptConfig
    litho: LithoConfig


def smoke_problem() -> Problem:
    """A 280 nm square on a 64 x 64 grid at 8 nm/px under a Gaussian low-pass.

    The kernel passes about 4 cycles across the 512 nm field, so the raw
    square prints with rounded, pulled-back corners and there is real
    work for the optimizer.  Morphology discs are shrunk to suit the grid.
    """
    spec = GridSpec.square(64, 8.0)
    layout = PolygonLayout([Polygon.rect(116, 116, 396, 396)])
    opt = OptConfig(T=200, s=1, lr=0.05, k_cvx=5, k_ccv=5, k_morph=3)
    litho = LithoConfig(synth_gaussian_kernels(freq_dim=9, sigma_freq=2.0, defocus_blur=1.25))
    return Problem(layout, rasterize(layout, spec), opt, litho)
