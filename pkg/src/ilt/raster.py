"""Raster grids, Manhattan polygon layouts, resampling and binarization.

Images are row-major: ``data[row, col]`` with row ``i`` covering
``y in [i*p, (i+1)*p)`` and column ``j`` covering ``x in [j*p, (j+1)*p)``
for pixel pitch ``p`` in nm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, OutOfBoundsError, ValidationError

__all__ = [
    "GridSpec",
    "GrayImage",
    "BinaryImage",
    "Polygon",
    "PolygonLayout",
    "rasterize",
    "downsample",
    "upsample_bicubic",
    "binarize",
    "parse_layout",
    "read_layout",
    "write_layout",
    "save_png",
    "load_png",
    "save_pgm16",
    "load_pgm16",
]

BICUBIC_A = -0.5


@dataclass(frozen=True)
class GridSpec:
    width_px: int
    height_px: int
    nm_per_px: float = 1.0

    def __post_init__(self):
        if int(self.width_px) != self.width_px or self.width_px <= 0:
            raise ValidationError(f"width_px must be a positive integer, got {self.width_px}")
        if int(self.height_px) != self.height_px or self.height_px <= 0:
            raise ValidationError(f"height_px must be a positive integer, got {self.height_px}")
        if not (self.nm_per_px > 0 and np.isfinite(self.nm_per_px)):
            raise ValidationError(f"nm_per_px must be positive, got {self.nm_per_px}")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.height_px), int(self.width_px))

    @property
    def extent_nm(self) -> tuple[float, float]:
        return (self.width_px * self.nm_per_px, self.height_px * self.nm_per_px)

    @classmethod
    def square(cls, side_px: int, nm_per_px: float = 1.0) -> "GridSpec":
        return cls(side_px, side_px, nm_per_px)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        if arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Continuous-valued image on a grid. ``data`` is a read-only float64 array."""

    spec: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.spec.shape:
            raise DimensionError(f"data shape {data.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("image contains non-finite entries")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "GrayImage":
        return cls(spec, np.zeros(spec.shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape

    def with_data(self, data: np.ndarray) -> "GrayImage":
        return GrayImage(self.spec, data)


@dataclass(frozen=True, eq=False)
class BinaryImage:
    """Image whose entries are exactly 0 or 1, stored as read-only uint8."""

    spec: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.shape != self.spec.shape:
            raise DimensionError(f"data shape {raw.shape} does not match grid {self.spec.shape}")
        if raw.dtype != np.uint8 or raw.size and raw.max() > 1:
            if not np.all((raw == 0) | (raw == 1)):
                raise ValidationError("binary image entries must be 0 or 1")
            raw = raw.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(raw))

    @classmethod
    def zeros(cls, spec: GridSpec) -> "BinaryImage":
        return cls(spec, np.zeros(spec.shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape

    def as_gray(self) -> GrayImage:
        return GrayImage(self.spec, self.data.astype(np.float64))

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.data, other.data)

    __hash__ = None


# --------------------------------------------------------------------------
# Polygon layouts
# --------------------------------------------------------------------------

def _segments_cross(a0, a1, b0, b1) -> bool:
    """True when axis-aligned segments a and b share a point."""
    ax0, ax1 = sorted((a0[0], a1[0]))
    ay0, ay1 = sorted((a0[1], a1[1]))
    bx0, bx1 = sorted((b0[0], b1[0]))
    by0, by1 = sorted((b0[1], b1[1]))
    return ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1


@dataclass(frozen=True)
class Polygon:
    """Simple rectilinear polygon; the closing edge back to vertex 0 is implicit."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) >= 2 and verts[0] == verts[-1]:
            verts = verts[:-1]
        object.__setattr__(self, "vertices", verts)
        self._validate()

    def _validate(self):
        v = self.vertices
        n = len(v)
        if n < 4 or n % 2:
            raise FormatError(f"Manhattan polygon needs an even vertex count >= 4, got {n}")
        kinds = []
        for i in range(n):
            (x0, y0), (x1, y1) = v[i], v[(i + 1) % n]
            if x0 == x1 and y0 != y1:
                kinds.append("v")
            elif y0 == y1 and x0 != x1:
                kinds.append("h")
            else:
                raise FormatError(f"edge {i} from {v[i]} to {v[(i + 1) % n]} is not axis-aligned")
        for i in range(n):
            if kinds[i] == kinds[(i + 1) % n]:
                raise FormatError(f"edges {i} and {(i + 1) % n} do not alternate horizontal/vertical")
        # Non-adjacent edges must not touch.
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise FormatError(f"polygon self-intersects at edges {i} and {j}")

    def edges(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def translate(self, dx: float, dy: float) -> "Polygon":
        return Polygon(tuple((x + dx, y + dy) for x, y in self.vertices))

    @property
    def area(self) -> float:
        v = np.asarray(self.vertices)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    @classmethod
    def rect(cls, x0: float, y0: float, x1: float, y1: float) -> "Polygon":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


@dataclass(frozen=True)
class PolygonLayout:
    polygons: tuple[Polygon, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))

    @property
    def bbox(self) -> tuple[float, float, float, float] | None:
        """(xmin, ymin, xmax, ymax) in nm, or None for an empty layout."""
        if not self.polygons:
            return None
        pts = np.array([p for poly in self.polygons for p in poly.vertices])
        return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())

    def translate(self, dx: float, dy: float) -> "PolygonLayout":
        return PolygonLayout(tuple(p.translate(dx, dy) for p in self.polygons))

    def __len__(self):
        return len(self.polygons)


def parse_layout(text: str) -> PolygonLayout:
    """Parse ``poly x1 y1 ... xn yn`` lines; ``#`` starts a comment line."""
    polys = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] != "poly":
            raise FormatError(f"line {lineno}: expected 'poly', got {tokens[0]!r}")
        try:
            coords = [int(t) for t in tokens[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: coordinates must be integers") from exc
        if len(coords) % 2:
            raise FormatError(f"line {lineno}: odd number of coordinates")
        try:
            polys.append(Polygon(tuple(zip(coords[0::2], coords[1::2]))))
        except FormatError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    return PolygonLayout(tuple(polys))


def read_layout(path) -> PolygonLayout:
    return parse_layout(Path(path).read_text())


def write_layout(layout: PolygonLayout, path) -> None:
    lines = []
    for poly in layout.polygons:
        coords = " ".join(f"{int(round(x))} {int(round(y))}" for x, y in poly.vertices)
        lines.append(f"poly {coords}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

def rasterize(layout: PolygonLayout, spec: GridSpec) -> BinaryImage:
    """Pixel-center, even-odd rasterization of a Manhattan layout.

    Each vertical edge toggles the parity of every pixel in the rows it spans
    whose center lies to its right; a cumulative XOR along each row then
    yields the even-odd fill.
    """
    h, w = spec.shape
    p = spec.nm_per_px
    if layout.bbox is not None:
        xmin, ymin, xmax, ymax = layout.bbox
        wx, wy = spec.extent_nm
        if xmin < 0 or ymin < 0 or xmax > wx or ymax > wy:
            raise OutOfBoundsError(
                f"layout bbox {layout.bbox} exceeds grid extent (0, 0, {wx}, {wy})"
            )
    toggles = np.zeros((h, w + 1), dtype=np.uint8)
    for poly in layout.polygons:
        for (x0, y0), (x1, y1) in poly.edges():
            if x0 != x1:
                continue
            lo, hi = sorted((y0, y1))
            # rows whose center y=(i+0.5)p lies in [lo, hi)
            r0 = int(np.ceil(lo / p - 0.5))
            r1 = int(np.ceil(hi / p - 0.5))
            # first column whose center x=(j+0.5)p is >= x0
            c0 = int(np.ceil(x0 / p - 0.5))
            if r1 > r0 and c0 <= w:
                toggles[max(r0, 0):max(r1, 0), max(c0, 0)] ^= 1
    filled = np.bitwise_xor.accumulate(toggles, axis=1)[:, :w]
    return BinaryImage(spec, filled)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def downsample(img: GrayImage | BinaryImage, s: int) -> GrayImage:
    """Area-mean downsampling by an integer factor."""
    s = int(s)
    if s < 1:
        raise ValidationError(f"scale must be >= 1, got {s}")
    h, w = img.shape
    if h % s or w % s:
        raise DimensionError(f"grid {w}x{h} is not divisible by {s}")
    data = np.asarray(img.data, dtype=np.float64)
    spec = GridSpec(w // s, h // s, img.spec.nm_per_px * s)
    if s == 1:
        return GrayImage(spec, data)
    return GrayImage(spec, data.reshape(h // s, s, w // s, s).mean(axis=(1, 3)))


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = ((a + 2) * x[near] - (a + 3)) * x[near] ** 2 + 1
    out[far] = ((a * x[far] - 5 * a) * x[far] + 8 * a) * x[far] - 4 * a
    return out


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bicubic weights (n_out x n_in), half-pixel aligned.

    On downscale the kernel is stretched by the scale ratio (anti-aliasing);
    taps falling outside the input are dropped and the rest renormalized.
    """
    scale = n_in / n_out
    support = 2.0 * max(scale, 1.0)
    stretch = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    lo = np.floor(centers - support).astype(int)
    taps = int(np.ceil(2 * support)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    weights = _cubic((idx + 0.5 - centers[:, None]) / stretch)
    weights[(idx < 0) | (idx >= n_in)] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    valid = ((idx >= 0) & (idx < n_in)).ravel()
    np.add.at(mat, (rows[valid], idx.ravel()[valid]), weights.ravel()[valid])
    return mat


def upsample_bicubic(img: GrayImage | BinaryImage, s: int) -> GrayImage:
    """Separable bicubic (a=-0.5) upscaling by an integer factor."""
    s = int(s)
    if s < 1:
        raise ValidationError(f"scale must be >= 1, got {s}")
    data = np.asarray(img.data, dtype=np.float64)
    h, w = img.shape
    spec = GridSpec(w * s, h * s, img.spec.nm_per_px / s)
    if s == 1:
        return GrayImage(spec, data)
    rows = _resample_matrix(h, h * s)
    cols = _resample_matrix(w, w * s)
    return GrayImage(spec, rows @ data @ cols.T)


def binarize(img: GrayImage | BinaryImage, threshold: float) -> BinaryImage:
    return BinaryImage(img.spec, (np.asarray(img.data) > threshold).astype(np.uint8))


# --------------------------------------------------------------------------
# Image files
# --------------------------------------------------------------------------

def save_png(img: GrayImage | BinaryImage, path) -> None:
    """8-bit grayscale PNG; values are clipped to [0, 1] and mapped to 0..255."""
    from PIL import Image

    data = np.clip(np.asarray(img.data, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_png(path, nm_per_px: float = 1.0, binary: bool = True) -> GrayImage | BinaryImage:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    spec = GridSpec(arr.shape[1], arr.shape[0], nm_per_px)
    if binary:
        return BinaryImage(spec, (arr >= 0.5).astype(np.uint8))
    return GrayImage(spec, arr)


def save_pgm16(img: GrayImage, path) -> None:
    """Binary 16-bit portable graymap (P5, maxval 65535, big-endian)."""
    data = np.clip(np.asarray(img.data, dtype=np.float64), 0.0, 1.0)
    h, w = data.shape
    payload = np.round(data * 65535).astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + payload)


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def load_pgm16(path, nm_per_px: float = 1.0) -> GrayImage:
    raw = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    size = w * h * np.dtype(dtype).itemsize
    if len(raw) - offset < size:
        raise FormatError("truncated PGM payload")
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return GrayImage(GridSpec(w, h, nm_per_px), arr.astype(np.float64) / maxval)

