"""Optical kernel sets, the ``ILTK`` container format and synthetic kernels.

Responses are stored over a small DC-centered frequency window: entry
``[h + u, h + v]`` with ``h = freq_dim // 2`` is the transfer coefficient of
spatial-frequency mode ``(u, v)`` (row, column), independent of the raster
size the mask is simulated on.

Container layout (little-endian)::

    offset  size  field
    0       4     magic b"ILTK"
    4       4     version (u32, = 1)
    8       4     count (u32)
    12      4     freq_dim (u32)
    16      1     condition tag (0 = nominal, 1 = defocus)
    17      3     reserved, zero
    20      8*n   weights (f64)
    ...     16*n*f*f  responses, (re, im) f64 pairs, kernel-major, row-major
    end-4   4     CRC32 of every byte between the header and the checksum
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"ILTK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB3x")
_CRC = struct.Struct("<I")
TAGS = ("nominal", "defocus")

DEFAULT_DOSES = (1.02, 1.00, 0.98)  # outer, nominal, inner


@dataclass(frozen=True, eq=False)
class KernelSet:
    weights: np.ndarray = field(repr=False)
    responses: np.ndarray = field(repr=False)
    condition_tag: str = "nominal"

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        responses = np.asarray(self.responses, dtype=np.complex128)
        if responses.ndim == 2:
            responses = responses[None]
        if responses.ndim != 3 or responses.shape[1] != responses.shape[2]:
            raise ValidationError(f"responses must be count x f x f, got {responses.shape}")
        if weights.ndim != 1 or weights.shape[0] != responses.shape[0]:
            raise ValidationError(
                f"weight vector length {weights.size} does not match kernel count {responses.shape[0]}"
            )
        if responses.shape[1] % 2 == 0:
            raise ValidationError(f"freq_dim must be odd, got {responses.shape[1]}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(responses))):
            raise ValidationError("kernel set contains non-finite entries")
        if np.any(weights < 0):
            raise ValidationError("kernel weights must be nonnegative")
        if self.condition_tag not in TAGS:
            raise ValidationError(f"condition_tag must be one of {TAGS}, got {self.condition_tag!r}")
        for name, arr in (("weights", weights), ("responses", responses)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return int(self.weights.shape[0])

    @property
    def freq_dim(self) -> int:
        return int(self.responses.shape[1])

    def __eq__(self, other):
        if not isinstance(other, KernelSet):
            return NotImplemented
        return (
            self.condition_tag == other.condition_tag
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.responses, other.responses)
        )

    __hash__ = None


class Corner(NamedTuple):
    kernels: KernelSet
    dose: float


@dataclass(frozen=True)
class ProcessCorners:
    nominal: Corner
    outer: Corner
    inner: Corner

    def __post_init__(self):
        for name in ("nominal", "outer", "inner"):
            value = getattr(self, name)
            if not isinstance(value, Corner):
                object.__setattr__(self, name, Corner(*value))
        if not self.inner.dose < self.nominal.dose < self.outer.dose:
            raise ValidationError(
                "dose ordering violated: need inner < nominal < outer, got "
                f"{self.inner.dose}, {self.nominal.dose}, {self.outer.dose}"
            )
        dims = {c.kernels.freq_dim for c in (self.nominal, self.outer, self.inner)}
        if len(dims) != 1:
            raise ValidationError(f"corner kernel sets disagree on freq_dim: {sorted(dims)}")

    @property
    def freq_dim(self) -> int:
        return self.nominal.kernels.freq_dim


def encode_kernel_set(ks: KernelSet) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, ks.count, ks.freq_dim, TAGS.index(ks.condition_tag))
    body = ks.weights.astype("<f8").tobytes() + ks.responses.astype("<c16").tobytes()
    return header + body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_kernel_set(raw: bytes) -> KernelSet:
    if len(raw) < _HEADER.size + _CRC.size:
        raise FormatError("kernel file truncated before end of header")
    magic, version, count, freq_dim, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported kernel file version {version}")
    if tag >= len(TAGS):
        raise FormatError(f"unknown condition tag {tag}")
    n_resp = 16 * count * freq_dim * freq_dim
    body_len = len(raw) - _HEADER.size - _CRC.size
    if body_len != 8 * count + n_resp:
        extra = body_len - n_resp
        if extra > 0 and extra % 8 == 0:
            raise ValidationError(
                f"weight vector length {extra // 8} does not match kernel count {count}"
            )
        raise FormatError(
            f"kernel file size mismatch: body has {body_len} bytes, expected {8 * count + n_resp}"
        )
    body = raw[_HEADER.size:-_CRC.size]
    (crc,) = _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("kernel file checksum mismatch")
    weights = np.frombuffer(body, dtype="<f8", count=count)
    responses = np.frombuffer(body, dtype="<c16", offset=8 * count).reshape(count, freq_dim, freq_dim)
    return KernelSet(weights, responses, TAGS[tag])


def save_kernel_set(ks: KernelSet, path) -> None:
    Path(path).write_bytes(encode_kernel_set(ks))


def load_kernel_set(path) -> KernelSet:
    return decode_kernel_set(Path(path).read_bytes())


def import_npz(path, condition_tag: str = "nominal") -> KernelSet:
    """Read kernels from an ``.npz`` holding ``kernels`` (count x f x f) and ``weights``.

    ``scales`` is accepted as an alias of ``weights``.  Arrays exported from
    contest tooling are expected to be DC-centered already.
    """
    with np.load(path) as archive:
        if "kernels" not in archive:
            raise FormatError(f"{path}: missing 'kernels' array")
        key = "weights" if "weights" in archive else "scales"
        if key not in archive:
            raise FormatError(f"{path}: missing 'weights' (or 'scales') array")
        return KernelSet(archive[key].ravel(), archive["kernels"], condition_tag)


def gaussian_response(freq_dim: int, sigma_freq: float) -> np.ndarray:
    h = freq_dim // 2
    u = np.arange(-h, h + 1, dtype=np.float64)
    r2 = u[:, None] ** 2 + u[None, :] ** 2
    return np.exp(-0.5 * r2 / sigma_freq**2).astype(np.complex128)


def synth_gaussian_kernels(
    freq_dim: int = 35,
    sigma_freq: float = 8.0,
    defocus_blur: float = 1.25,
    doses: tuple[float, float, float] = DEFAULT_DOSES,
) -> ProcessCorners:
    """Single-kernel Gaussian low-pass corners; the defocus passband is narrower."""
    if int(freq_dim) != freq_dim or freq_dim < 3 or freq_dim % 2 == 0:
        raise ValidationError(f"freq_dim must be an odd integer >= 3, got {freq_dim}")
    if not sigma_freq > 0:
        raise ValidationError(f"sigma_freq must be positive, got {sigma_freq}")
    if not defocus_blur >= 1:
        raise ValidationError(f"defocus_blur must be >= 1, got {defocus_blur}")
    nominal = KernelSet(np.ones(1), gaussian_response(freq_dim, sigma_freq), "nominal")
    defocus = KernelSet(np.ones(1), gaussian_response(freq_dim, sigma_freq / defocus_blur), "defocus")
    outer, nom, inner = doses
    return ProcessCorners(Corner(nominal, nom), Corner(defocus, outer), Corner(defocus, inner))


def replicate(ks: KernelSet, count: int) -> KernelSet:
    """``count`` copies of every kernel with weights divided by ``count``.

    The simulated intensity is unchanged while the per-kernel work scales
    with ``count``, which makes this useful for throughput measurements.
    """
    return KernelSet(
        np.tile(ks.weights, count) / count,
        np.tile(ks.responses, (count, 1, 1)),
        ks.condition_tag,
    )
