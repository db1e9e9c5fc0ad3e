"""Forward lithography (aerial image, resist) and its adjoint.

The intensity of a mask ``M`` under one kernel set is::

    I = dose * sum_i alpha_i * |E_i|**2,
    E_i = ifft2(embed(window(fft2(M)) * H_i))

where ``window`` keeps the ``freq_dim x freq_dim`` block of lowest
frequencies and ``embed`` puts it back into an otherwise zero spectrum.
Because only that block is ever nonzero, both transforms are evaluated as
partial DFTs (dense matmuls against ``freq_dim`` Fourier rows), which is
exact and considerably cheaper than full FFTs.  ``fft2`` is unnormalized
and ``ifft2`` carries the ``1 / (H * W)`` factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DimensionError, ValidationError
from .kernels import KernelSet, ProcessCorners
from .raster import BinaryImage, GrayImage

# Kernels processed per batch; bounds the transient (chunk, H, W) complex buffers.
KERNEL_CHUNK = 8


@dataclass(frozen=True)
class LithoConfig:
    corners: ProcessCorners
    d_th: float = 0.225
    beta2: float = 50.0

    def __post_init__(self):
        if not self.d_th > 0:
            raise ValidationError(f"d_th must be positive, got {self.d_th}")
        if not self.beta2 > 0:
            raise ValidationError(f"beta2 must be positive, got {self.beta2}")


@lru_cache(maxsize=16)
def _dft_rows(n: int, half: int) -> np.ndarray:
    """(2*half+1, n) forward DFT rows for modes -half..half; read-only."""
    modes = np.arange(-half, half + 1)
    mat = np.exp(-2j * np.pi * np.outer(modes, np.arange(n)) / n)
    mat.flags.writeable = False
    return mat


def window_spectrum(data: np.ndarray, freq_dim: int) -> np.ndarray:
    """DC-centered low-frequency block of ``fft2(data)`` (unnormalized)."""
    h, w = data.shape[-2:]
    half = freq_dim // 2
    return _dft_rows(h, half) @ data @ _dft_rows(w, half).T


def embed_inverse(block: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """``ifft2`` of a spectrum that is zero outside the DC-centered block."""
    h, w = shape
    half = block.shape[-1] // 2
    rows = _dft_rows(h, half).conj().T
    cols = _dft_rows(w, half).conj()
    return (rows @ block @ cols) / (h * w)


@dataclass(frozen=True, eq=False)
class AdjointTape:
    """Intermediate fields of one aerial-image evaluation."""

    shape: tuple[int, int]
    kernels: KernelSet
    dose: float
    fields: np.ndarray = field(repr=False)


def _check_grid(shape, ks: KernelSet):
    if min(shape) < ks.freq_dim:
        raise DimensionError(
            f"grid {shape[1]}x{shape[0]} is smaller than kernel window {ks.freq_dim}"
        )


def _fields(data: np.ndarray, ks: KernelSet) -> np.ndarray:
    spectrum = window_spectrum(data, ks.freq_dim)
    return embed_inverse(spectrum[None] * ks.responses, data.shape)


def _intensity(fields: np.ndarray, weights: np.ndarray) -> np.ndarray:
    power = fields.real**2 + fields.imag**2
    return np.tensordot(weights, power, axes=1)


def aerial_image(
    mask_c: GrayImage | BinaryImage, ks: KernelSet, dose: float = 1.0, with_tape: bool = True
) -> tuple[GrayImage, AdjointTape | None]:
    data = np.asarray(mask_c.data, dtype=np.float64)
    _check_grid(data.shape, ks)
    if with_tape:
        fields = _fields(data, ks)
        intensity = dose * _intensity(fields, ks.weights)
        tape = AdjointTape(data.shape, ks, dose, fields)
    else:
        intensity = np.zeros(data.shape)
        spectrum = window_spectrum(data, ks.freq_dim)
        for lo in range(0, ks.count, KERNEL_CHUNK):
            chunk = slice(lo, lo + KERNEL_CHUNK)
            fields = embed_inverse(spectrum[None] * ks.responses[chunk], data.shape)
            intensity += _intensity(fields, ks.weights[chunk])
        intensity *= dose
        tape = None
    # |E|^2 sums are nonnegative up to rounding; clamp the -0.0 / -1e-300 noise.
    return GrayImage(mask_c.spec, np.maximum(intensity, 0.0)), tape


def litho_vjp(tape: AdjointTape, upstream: GrayImage | np.ndarray) -> GrayImage | np.ndarray:
    """Gradient of ``<upstream, I>`` with respect to the (real) mask."""
    grad = np.asarray(upstream.data if isinstance(upstream, GrayImage) else upstream)
    if grad.shape != tape.shape:
        raise DimensionError(f"upstream shape {grad.shape} does not match tape {tape.shape}")
    ks = tape.kernels
    acc = np.zeros((ks.freq_dim, ks.freq_dim), dtype=np.complex128)
    for lo in range(0, ks.count, KERNEL_CHUNK):
        chunk = slice(lo, lo + KERNEL_CHUNK)
        scale = (2.0 * tape.dose * ks.weights[chunk])[:, None, None]
        g = scale * grad[None] * tape.fields[chunk]
        acc += np.sum(np.conj(ks.responses[chunk]) * window_spectrum(g, ks.freq_dim), axis=0)
    # adjoint chain: ifft2(embed(conj(H) * window(fft2(g)))); the DFT scale factors cancel
    out = embed_inverse(acc, tape.shape).real
    if isinstance(upstream, GrayImage):
        return upstream.with_data(out)
    return out


def mask_sigmoid(m: GrayImage, beta1: float, m_s: float = 0.5) -> GrayImage:
    return m.with_data(expit(beta1 * (np.asarray(m.data) - m_s)))


def resist_soft(intensity: GrayImage, cfg: LithoConfig) -> GrayImage:
    return intensity.with_data(expit(cfg.beta2 * (np.asarray(intensity.data) - cfg.d_th)))


def resist_hard(intensity: GrayImage, d_th: float) -> BinaryImage:
    return BinaryImage(intensity.spec, (np.asarray(intensity.data) >= d_th).astype(np.uint8))


def sigmoid_vjp(out: np.ndarray, upstream: np.ndarray, steepness: float) -> np.ndarray:
    """Backward pass of ``expit(steepness * (x - c))`` given its output."""
    return upstream * steepness * out * (1.0 - out)


class CornerTapes(NamedTuple):
    nominal: AdjointTape
    outer: AdjointTape
    inner: AdjointTape


def _corner_fields(data, cfg: LithoConfig):
    """Fields for each corner, computed once per distinct kernel set."""
    cache: list[tuple[KernelSet, np.ndarray]] = []
    out = []
    for corner in (cfg.corners.nominal, cfg.corners.outer, cfg.corners.inner):
        for ks, fields in cache:
            if ks is corner.kernels or ks == corner.kernels:
                break
        else:
            fields = _fields(data, corner.kernels)
            cache.append((corner.kernels, fields))
        out.append(fields)
    return out


def simulate_corners(mask_c: GrayImage, cfg: LithoConfig):
    """Soft resist images at the nominal, outer and inner corners.

    Returns ``(z_nom, z_max, z_min, tapes)``.
    """
    data = np.asarray(mask_c.data, dtype=np.float64)
    _check_grid(data.shape, cfg.corners.nominal.kernels)
    tapes, images = [], []
    corners = (cfg.corners.nominal, cfg.corners.outer, cfg.corners.inner)
    for corner, fields in zip(corners, _corner_fields(data, cfg)):
        intensity = np.maximum(corner.dose * _intensity(fields, corner.kernels.weights), 0.0)
        tapes.append(AdjointTape(data.shape, corner.kernels, corner.dose, fields))
        images.append(resist_soft(mask_c.with_data(intensity), cfg))
    return images[0], images[1], images[2], CornerTapes(*tapes)


def corners_vjp(tapes: CornerTapes, resists, upstreams, cfg: LithoConfig) -> np.ndarray:
    """Gradient w.r.t. the mask given d(loss)/d(resist) at each corner.

    Corners sharing a field array are folded into one adjoint pass; the
    adjoint is linear in ``dose * upstream``.
    """
    groups: list[tuple[AdjointTape, np.ndarray]] = []
    for tape, z, up in zip(tapes, resists, upstreams):
        z = np.asarray(z.data if isinstance(z, GrayImage) else z)
        d_int = sigmoid_vjp(z, np.asarray(up), cfg.beta2) * tape.dose
        for i, (seen, acc) in enumerate(groups):
            if seen.fields is tape.fields:
                groups[i] = (seen, acc + d_int)
                break
        else:
            groups.append((tape, d_int))
    grad = np.zeros(tapes.nominal.shape)
    for tape, d_int in groups:
        unit = AdjointTape(tape.shape, tape.kernels, 1.0, tape.fields)
        grad += litho_vjp(unit, d_int)
    return grad


def print_corners(mask: GrayImage | BinaryImage, cfg: LithoConfig) -> tuple[BinaryImage, BinaryImage, BinaryImage]:
    """Hard-threshold prints ``(nominal, outer, inner)`` without keeping tapes."""
    gray = mask.as_gray() if isinstance(mask, BinaryImage) else mask
    intensities = {}
    prints = []
    for corner in (cfg.corners.nominal, cfg.corners.outer, cfg.corners.inner):
        key = id(corner.kernels)
        if key not in intensities:
            intensities[key] = aerial_image(gray, corner.kernels, 1.0, with_tape=False)[0]
        base = intensities[key]
        prints.append(resist_hard(base.with_data(corner.dose * base.data), cfg.d_th))
    return tuple(prints)
