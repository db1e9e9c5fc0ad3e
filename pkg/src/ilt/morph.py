"""Flat morphology with disc elements, gradient routing, and design retargeting.

Conventions shared by every operator here:

* Only on-disc window entries take part in the min/max; off-disc entries
  are excluded rather than multiplied to zero.
* The image is zero-padded by ``k // 2``, so out-of-bounds pixels count as 0
  for both dilation and erosion (shapes touching the border erode inward).
* Arg-extremum ties go to the window entry with the smallest row-major
  offset, which makes the routed gradients deterministic.

Opening is erosion followed by dilation (rounds convex corners, removes
specks); closing is dilation followed by erosion (rounds concave corners,
fills gaps).  Erosion at the border means closing is only extensive for
content at least ``k // 2`` pixels away from the image edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DimensionError, ValidationError
from .raster import BinaryImage, GrayImage


@dataclass(frozen=True, eq=False)
class StructElem:
    k: int
    data: np.ndarray = field(repr=False)

    @property
    def radius_sq(self) -> float:
        return (self.k / 2.0) ** 2

    def offsets(self) -> np.ndarray:
        """On-disc (row, col) window offsets in row-major order, shape (n, 2)."""
        return np.argwhere(self.data)


def disc_element(k: int) -> StructElem:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ValidationError(f"disc size must be an odd positive integer, got {k}")
    k = int(k)
    c = (k - 1) / 2
    i, j = np.mgrid[:k, :k]
    data = ((i - c) ** 2 + (j - c) ** 2 <= (k / 2.0) ** 2).astype(np.uint8)
    data.flags.writeable = False
    return StructElem(k, data)


def _as_elem(b: StructElem | int) -> StructElem:
    return b if isinstance(b, StructElem) else disc_element(b)


@dataclass(frozen=True, eq=False)
class MorphTape:
    """Chosen source pixel of every output, kept as an index into ``offsets``."""

    shape: tuple[int, int]
    pad: int
    offsets: np.ndarray = field(repr=False)
    choice: np.ndarray = field(repr=False)

    def sources(self) -> np.ndarray:
        """Flat indices into the padded grid, one per output pixel."""
        h, w = self.shape
        wp = w + 2 * self.pad
        rows = np.arange(h)[:, None] + self.offsets[self.choice, 0]
        cols = np.arange(w)[None, :] + self.offsets[self.choice, 1]
        return rows * wp + cols


def _sliding_extremum(data: np.ndarray, elem: StructElem, take_max: bool):
    h, w = data.shape
    pad = elem.k // 2
    padded = np.pad(data, pad)
    offsets = elem.offsets()
    best = padded[offsets[0, 0]:offsets[0, 0] + h, offsets[0, 1]:offsets[0, 1] + w].copy()
    choice = np.zeros((h, w), dtype=np.int32)
    for n in range(1, len(offsets)):
        di, dj = offsets[n]
        cand = padded[di:di + h, dj:dj + w]
        better = cand > best if take_max else cand < best
        np.copyto(best, cand, where=better)
        choice[better] = n
    return best, MorphTape((h, w), pad, offsets, choice)


def _image_data(a) -> np.ndarray:
    return np.asarray(a.data, dtype=np.float64)


def dilate(a: GrayImage | BinaryImage, b: StructElem | int) -> tuple[GrayImage, MorphTape]:
    out, tape = _sliding_extremum(_image_data(a), _as_elem(b), take_max=True)
    return GrayImage(a.spec, out), tape


def erode(a: GrayImage | BinaryImage, b: StructElem | int) -> tuple[GrayImage, MorphTape]:
    out, tape = _sliding_extremum(_image_data(a), _as_elem(b), take_max=False)
    return GrayImage(a.spec, out), tape


def morph_vjp(tape: MorphTape, upstream: GrayImage | np.ndarray) -> np.ndarray:
    """Route each upstream value to its recorded source; padding sources are dropped."""
    up = np.asarray(upstream.data if isinstance(upstream, GrayImage) else upstream, dtype=np.float64)
    if up.shape != tape.shape:
        raise DimensionError(f"upstream shape {up.shape} does not match tape {tape.shape}")
    h, w = tape.shape
    p = tape.pad
    flat = np.bincount(tape.sources().ravel(), weights=up.ravel(), minlength=(h + 2 * p) * (w + 2 * p))
    return flat.reshape(h + 2 * p, w + 2 * p)[p:p + h, p:p + w]


def opening(a: GrayImage | BinaryImage, b: StructElem | int) -> GrayImage:
    b = _as_elem(b)
    return dilate(erode(a, b)[0], b)[0]


def closing(a: GrayImage | BinaryImage, b: StructElem | int) -> GrayImage:
    b = _as_elem(b)
    return erode(dilate(a, b)[0], b)[0]


def corner_merge(a, opened, closed) -> GrayImage:
    """``clip(opened + closed - a, 0, 1)``; on binary inputs this is again binary."""
    if not (a.shape == opened.shape == closed.shape):
        raise DimensionError("corner_merge inputs must share one grid")
    out = np.clip(_image_data(opened) + _image_data(closed) - _image_data(a), 0.0, 1.0)
    return GrayImage(a.spec, out)


# --------------------------------------------------------------------------
# Differentiable in-loop cleanup
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MergeTape:
    open_erode: MorphTape
    open_dilate: MorphTape
    close_dilate: MorphTape
    close_erode: MorphTape
    passthrough: np.ndarray = field(repr=False)  # 1 where the clip was inactive


def smooth_merge(mc: np.ndarray, b: StructElem | int) -> tuple[np.ndarray, MergeTape]:
    """``clip(open(mc) + close(mc) - mc, 0, 1)`` on an array, with its tape."""
    b = _as_elem(b)
    eroded, t_oe = _sliding_extremum(mc, b, take_max=False)
    opened, t_od = _sliding_extremum(eroded, b, take_max=True)
    dilated, t_cd = _sliding_extremum(mc, b, take_max=True)
    closed, t_ce = _sliding_extremum(dilated, b, take_max=False)
    raw = opened + closed - mc
    inside = (raw >= 0.0) & (raw <= 1.0)
    return np.clip(raw, 0.0, 1.0), MergeTape(t_oe, t_od, t_cd, t_ce, inside.astype(np.float64))


def smooth_merge_vjp(tape: MergeTape, upstream: np.ndarray) -> np.ndarray:
    g = upstream * tape.passthrough
    via_open = morph_vjp(tape.open_erode, morph_vjp(tape.open_dilate, g))
    via_close = morph_vjp(tape.close_dilate, morph_vjp(tape.close_erode, g))
    return via_open + via_close - g


# --------------------------------------------------------------------------
# Binary fast path
# --------------------------------------------------------------------------
# For {0, 1} images a disc dilation is a thresholded Euclidean distance
# transform, which costs O(N) regardless of the element size.  Results are
# identical to the sliding-window operators above.

def _bin_dilate(data: np.ndarray, k: int) -> np.ndarray:
    if not data.any():
        return np.zeros_like(data, dtype=np.uint8)
    dist = distance_transform_edt(data == 0)
    # squared distances are integers; 0.25 slack is far above the sqrt round-off
    return (np.rint(dist * dist) <= (k / 2.0) ** 2).astype(np.uint8)


def _bin_erode(data: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    holes = np.pad(data == 0, pad, constant_values=True).astype(np.uint8)
    grown = _bin_dilate(holes, k)
    h, w = data.shape
    return (1 - grown[pad:pad + h, pad:pad + w]).astype(np.uint8)


def _binary_data(a) -> np.ndarray:
    data = np.asarray(a.data)
    if isinstance(a, BinaryImage):
        return data
    if not np.all((data == 0) | (data == 1)):
        raise ValidationError("binary morphology needs a {0, 1} image")
    return data.astype(np.uint8)


def binary_dilate(a, k: int | StructElem) -> BinaryImage:
    k = _as_elem(k).k
    return BinaryImage(a.spec, _bin_dilate(_binary_data(a), k))


def binary_erode(a, k: int | StructElem) -> BinaryImage:
    k = _as_elem(k).k
    return BinaryImage(a.spec, _bin_erode(_binary_data(a), k))


def binary_opening(a, k: int | StructElem) -> BinaryImage:
    k = _as_elem(k).k
    return BinaryImage(a.spec, _bin_dilate(_bin_erode(_binary_data(a), k), k))


def binary_closing(a, k: int | StructElem) -> BinaryImage:
    k = _as_elem(k).k
    return BinaryImage(a.spec, _bin_erode(_bin_dilate(_binary_data(a), k), k))


def binary_merge(a: BinaryImage, opened: BinaryImage, closed: BinaryImage) -> BinaryImage:
    raw = opened.data.astype(np.int16) + closed.data - a.data
    return BinaryImage(a.spec, np.clip(raw, 0, 1).astype(np.uint8))


def cdr(target: BinaryImage, k_cvx: int, k_ccv: int) -> BinaryImage:
    """Round the convex corners by opening and the concave corners by closing."""
    if not isinstance(target, BinaryImage):
        target = BinaryImage(target.spec, _binary_data(target))
    convex = binary_opening(target, k_cvx)
    concave = binary_closing(target, k_ccv)
    return binary_merge(target, convex, concave)
